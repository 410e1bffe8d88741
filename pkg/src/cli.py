# src/cli.py
import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from camera_pose import PoseSE3
from checkpoint import load_checkpoint, restore_engine, save_checkpoint
from dataio import (
    FrameRGBD, load_mesh_ply, load_tum_sequence, read_tum_trajectory,
    save_mesh_ply, write_color_png, write_depth_png, write_tum_trajectory,
)
from eval_metrics import (
    MetricReport, cull_mesh, evaluate_run, extract_field_mesh, metric_ate, psnr, rendered_depth_l1,
)
from renderer import CameraIntrinsics
from run_manager import RunManager
from slam_engine import SlamEngine, track_frame
from synth_world import SynthScene, scene_mesh, synth_sequence, write_tum_dataset
from utils import ConfigError, load_config, seed_everything

BOUNDS_MARGIN_TUM = 0.5


@dataclass
class Stream:
    """Входной поток запуска"""

    frames: List[FrameRGBD]
    gt_poses: Optional[List[PoseSE3]]
    intrinsics: CameraIntrinsics
    bounds: np.ndarray
    scene: Optional[SynthScene] = None

    @property
    def timestamps(self) -> List[float]:
        return [f.timestamp for f in self.frames]


def initial_pose(cfg: dict, gt_poses: Optional[List[PoseSE3]]) -> PoseSE3:
    """Поза первого кадра: из конфига, из эталона или единичная"""
    if cfg["dataset"]["init_pose"] is not None:
        return PoseSE3.from_tum(cfg["dataset"]["init_pose"])
    if gt_poses:
        return gt_poses[0]
    return PoseSE3.identity()


def estimate_bounds(frame: FrameRGBD, pose: PoseSE3, margin: float = BOUNDS_MARGIN_TUM) -> np.ndarray:
    """Границы сцены по облаку точек первого кадра"""
    intr = frame.intrinsics
    v, u = np.nonzero(frame.valid)
    if len(u) == 0:
        raise ValueError("В первом кадре нет валидной глубины: задайте dataset.bounds")
    z = frame.depth[v, u]
    cam = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
    world = pose.transform_points(np.vstack([cam, np.zeros((1, 3))]))
    return np.stack([world.min(axis=0) - margin, world.max(axis=0) + margin])


def load_stream(cfg: dict, rng: np.random.Generator) -> Stream:
    """
    Кадры запуска: синтетическая сцена в памяти, синтетический датасет на диске или TUM

    Args:
        cfg: Полный конфиг
        rng: Генератор запуска

    Returns:
        Stream
    """
    ds = cfg["dataset"]
    intr = CameraIntrinsics.from_dict(ds["intrinsics"])
    scene = None
    if ds["kind"] == "synthetic":
        scene = SynthScene.from_config(cfg["scene"])
        if ds["path"] is None:
            _, synth = synth_sequence(cfg, intr, rng)
            frames = [sf.frame for sf in synth]
            gt_poses = [sf.pose for sf in synth]
            frames, gt_poses = frames[::ds["stride"]], gt_poses[::ds["stride"]]
            if ds["max_frames"]:
                frames, gt_poses = frames[:ds["max_frames"]], gt_poses[:ds["max_frames"]]
            return Stream(frames, gt_poses, intr, _bounds(cfg, scene.bounds), scene)

    if ds["path"] is None:
        raise ValueError("dataset.path обязателен для датасета TUM")
    seq = load_tum_sequence(ds["path"], intr, ds["assoc_tolerance"], ds["max_frames"], ds["stride"])
    if scene is not None:
        bounds = _bounds(cfg, scene.bounds)
    elif ds["bounds"] is not None:
        bounds = np.asarray(ds["bounds"], dtype=np.float64)
    else:
        bounds = estimate_bounds(seq.frames[0], initial_pose(cfg, seq.gt_poses))
    return Stream(seq.frames, seq.gt_poses, seq.intrinsics, bounds, scene)


def _bounds(cfg: dict, default: np.ndarray) -> np.ndarray:
    b = cfg["dataset"]["bounds"]
    return default if b is None else np.asarray(b, dtype=np.float64)


def cmd_synth(cfg: dict, args, rm: RunManager) -> int:
    """Синтетический датасет в раскладке TUM + эталонный меш"""
    rng = seed_everything(cfg["seed"])
    intr = CameraIntrinsics.from_dict(cfg["dataset"]["intrinsics"])
    scene, frames = synth_sequence(cfg, intr, rng)
    root = write_tum_dataset(rm.dataset, frames, intr)
    save_mesh_ply(scene_mesh(scene, cfg["eval"]["gt_mesh_resolution"]), root / "gt_mesh.ply")
    print(f"✅ Датасет готов: {root}")
    return 0


def cmd_run(cfg: dict, args, rm: RunManager) -> int:
    """Полный SLAM: траектория, чекпоинт, меш, рендер, метрики, логи"""
    rng = seed_everything(cfg["seed"])
    stream = load_stream(cfg, rng)
    rm.mark("load")
    print(f"🎯 SLAM: {len(stream.frames)} кадров, режим {cfg['model']['mode']}")

    with rm.open_log() as log:
        engine = SlamEngine(cfg, stream.bounds, rng, hook=log)
        trajectory = engine.run(stream.frames, initial_pose(cfg, stream.gt_poses))
    rm.mark("slam")

    write_tum_trajectory(rm.trajectory, stream.timestamps, trajectory)
    if stream.gt_poses:
        write_tum_trajectory(rm.gt_trajectory, stream.timestamps, stream.gt_poses)
    save_checkpoint(engine, stream.intrinsics, rm.checkpoint)

    tr = cfg["rendering"]["truncation"]
    mesh = extract_field_mesh(engine.field, tr, cfg["eval"]["mesh_resolution"])
    culled = cull_mesh(mesh, trajectory, stream.intrinsics, stream.bounds)
    save_mesh_ply(mesh, rm.mesh)
    save_mesh_ply(culled, rm.culled_mesh)
    rm.mark("mesh")

    color, depth = engine.renderer.render_frame(engine.field, trajectory[-1], stream.intrinsics)
    write_color_png(rm.renders / "last_color.png", color)
    write_depth_png(rm.renders / "last_depth.png", depth, 1000.0)
    last_psnr = psnr(color, stream.frames[-1].color)
    render_l1 = rendered_depth_l1(engine.renderer, engine.field, stream.frames, trajectory, cfg["verbose"])
    rm.mark("render")

    gt_surface, gt_mesh = None, None
    if stream.scene is not None:
        gt_surface = dataclasses.replace(stream.scene, occluder=None)
        gt_mesh = scene_mesh(gt_surface, cfg["eval"]["gt_mesh_resolution"])
        save_mesh_ply(gt_mesh, rm.gt_mesh)
    report = evaluate_run(
        cfg, culled, trajectory, stream.gt_poses, gt_surface, gt_mesh,
        stream.intrinsics, stream.bounds, np.random.default_rng(cfg["seed"] + 1),
    )
    report.details["render_depth_l1_cm"] = render_l1
    report.details["psnr_last_frame"] = last_psnr
    report.save(rm.metrics)
    rm.mark("eval")

    rm.write_summary(cfg, {"frames": len(trajectory), "log_rows": log.rows, "metrics": report.to_dict()})
    _print_report(report)
    rm.show_status()
    return 0


def cmd_track(cfg: dict, args, rm: RunManager) -> int:
    """Только трекинг потока по полю из чекпоинта"""
    payload = load_checkpoint(args.checkpoint or rm.checkpoint)
    rng = seed_everything(cfg["seed"])
    engine = restore_engine(payload, rng)
    stream = load_stream(cfg, rng)

    poses = [initial_pose(cfg, stream.gt_poses)]
    for i, frame in enumerate(stream.frames[1:], start=1):
        poses.append(track_frame(frame, engine.field, engine.renderer, poses[-1], cfg["tracking"], rng, frame_id=i))
    out = rm.root / "trajectory_tracked.txt"
    write_tum_trajectory(out, stream.timestamps, poses)
    if stream.gt_poses:
        mean, rmse = metric_ate(poses, stream.gt_poses, align=cfg["eval"]["align"])
        print(f"🎯 ATE трекинга: mean {mean:.3f} см, RMSE {rmse:.3f} см")
    print(f"✅ Траектория трекинга: {out}")
    return 0


def cmd_render(cfg: dict, args, rm: RunManager) -> int:
    """Новый ракурс RGB-D из чекпоинта"""
    payload = load_checkpoint(args.checkpoint or rm.checkpoint)
    engine = restore_engine(payload)
    intr = CameraIntrinsics.from_dict(payload["intrinsics"])
    if args.pose is not None:
        pose, tag = PoseSE3.from_tum(args.pose), "pose"
    else:
        index = args.frame if args.frame is not None else len(engine.trajectory) - 1
        if not 0 <= index < len(engine.trajectory):
            raise ValueError(f"Кадра {index} нет в траектории ({len(engine.trajectory)} кадров)")
        pose, tag = engine.trajectory[index], f"frame{index:05d}"

    color, depth = engine.renderer.render_frame(engine.field, pose, intr, seed=cfg["seed"])
    rm.renders.mkdir(parents=True, exist_ok=True)
    write_color_png(rm.renders / f"{tag}_color.png", color)
    write_depth_png(rm.renders / f"{tag}_depth.png", depth, 1000.0)
    print(f"✅ Рендер сохранён: {rm.renders / tag}_*.png")
    return 0


def cmd_mesh(cfg: dict, args, rm: RunManager) -> int:
    """Извлечение и отсечение меша из чекпоинта"""
    payload = load_checkpoint(args.checkpoint or rm.checkpoint)
    engine = restore_engine(payload)
    intr = CameraIntrinsics.from_dict(payload["intrinsics"])
    resolution = args.resolution or cfg["eval"]["mesh_resolution"]
    mesh = extract_field_mesh(engine.field, payload["config"]["rendering"]["truncation"], resolution)
    culled = cull_mesh(mesh, engine.trajectory, intr, payload["bounds"])
    rm.mesh.parent.mkdir(parents=True, exist_ok=True)
    save_mesh_ply(mesh, rm.mesh)
    save_mesh_ply(culled, rm.culled_mesh)
    print(f"✅ Меш: {len(culled.faces)} треугольников после отсечения ({len(mesh.faces)} до)")
    return 0


def cmd_eval(cfg: dict, args, rm: RunManager) -> int:
    """MetricReport по траектории и мешу"""
    _, estimated = read_tum_trajectory(args.trajectory or rm.trajectory)
    _, gt_poses = read_tum_trajectory(args.gt or rm.gt_trajectory)

    mesh_path = Path(args.mesh) if args.mesh else rm.culled_mesh
    rec_mesh = load_mesh_ply(mesh_path) if mesh_path.exists() else None
    gt_surface, gt_mesh, bounds = None, None, None
    intr = CameraIntrinsics.from_dict(cfg["dataset"]["intrinsics"])
    if cfg["dataset"]["kind"] == "synthetic" and rec_mesh is not None:
        gt_surface = dataclasses.replace(SynthScene.from_config(cfg["scene"]), occluder=None)
        gt_mesh = scene_mesh(gt_surface, cfg["eval"]["gt_mesh_resolution"])
        bounds = _bounds(cfg, gt_surface.bounds)

    report = evaluate_run(
        cfg, rec_mesh, estimated, gt_poses, gt_surface, gt_mesh, intr, bounds,
        np.random.default_rng(cfg["seed"] + 1),
    )
    rm.root.mkdir(parents=True, exist_ok=True)
    report.save(rm.metrics)
    _print_report(report)
    return 0


def _print_report(report: MetricReport):
    print("\n📊 Метрики:")
    for key, value in report.to_dict().items():
        if key != "details" and value is not None:
            print(f"   {key}: {value:.4f}")


HANDLERS = {
    "run": cmd_run,
    "track": cmd_track,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusion-slam", description="Локально-глобальный нейронный RGB-D SLAM")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="YAML-конфиг запуска")
    common.add_argument("--seed", type=int, default=None, help="Зерно (перекрывает конфиг)")
    common.add_argument("--out", default=None, help="Папка результатов (перекрывает output_dir)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Полный SLAM")
    sub.add_parser("synth", parents=[common], help="Синтетический датасет в раскладке TUM")

    track = sub.add_parser("track", parents=[common], help="Трекинг по чекпоинту")
    track.add_argument("--checkpoint", default=None)

    render = sub.add_parser("render", parents=[common], help="Рендер из чекпоинта")
    render.add_argument("--checkpoint", default=None)
    render.add_argument("--frame", type=int, default=None, help="Номер кадра траектории")
    render.add_argument("--pose", type=float, nargs=7, default=None, metavar="V",
                        help="tx ty tz qx qy qz qw")

    mesh = sub.add_parser("mesh", parents=[common], help="Меш из чекпоинта")
    mesh.add_argument("--checkpoint", default=None)
    mesh.add_argument("--resolution", type=float, default=None)

    ev = sub.add_parser("eval", parents=[common], help="Метрики")
    ev.add_argument("--trajectory", default=None)
    ev.add_argument("--gt", default=None)
    ev.add_argument("--mesh", default=None)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа командной строки

    Args:
        argv: Аргументы (по умолчанию sys.argv[1:])

    Returns:
        Код выхода: 0 успех, 1 ошибка выполнения, 2 ошибка вызова
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
    except FileNotFoundError:
        return 2
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1

    rm = RunManager(cfg["output_dir"])
    rm.create_layout()
    try:
        return HANDLERS[args.command](cfg, args, rm)
    except (ValueError, OSError, FloatingPointError, KeyError, RuntimeError) as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
