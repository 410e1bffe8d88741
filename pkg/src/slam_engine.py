# src/slam_engine.py
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from camera_pose import PoseSE3, pose_retract
from dataio import FrameRGBD
from fusion_field import FusionField, build_field
from losses import LossReport, LossWeights, compute_losses
from renderer import CameraIntrinsics, VolumeRenderer, pixels_to_rays
from tensor_core import DTYPE, AdamStepper, adam_step, as_array, backward, concat, frozen

ReportHook = Callable[[int, str, int, LossReport], None]


class TrackingDivergedError(FloatingPointError):
    """Не-конечный лосс при оптимизации позы"""


@dataclass
class Keyframe:
    frame_id: int
    frame: FrameRGBD
    pose: PoseSE3


class KeyframeStore:
    """Упорядоченные ключевые кадры и выбор окна картирования"""

    def __init__(self, interval: int, window: int):
        if interval <= 0 or window <= 0:
            raise ValueError(f"interval и window должны быть > 0: {interval}, {window}")
        self.interval = interval
        self.window = window
        self.keyframes: List[Keyframe] = []

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def ids(self) -> List[int]:
        return [kf.frame_id for kf in self.keyframes]

    def add(self, frame_id: int, frame: FrameRGBD, pose: PoseSE3) -> Keyframe:
        if frame_id % self.interval != 0:
            raise ValueError(f"Кадр {frame_id} не кратен интервалу {self.interval}")
        if self.keyframes and frame_id <= self.keyframes[-1].frame_id:
            raise ValueError(f"Ключевые кадры должны идти по возрастанию: {frame_id} после {self.ids[-1]}")
        kf = Keyframe(frame_id, frame, pose)
        self.keyframes.append(kf)
        return kf

    def update_pose(self, frame_id: int, pose: PoseSE3):
        for kf in self.keyframes:
            if kf.frame_id == frame_id:
                kf.pose = pose
                return
        raise KeyError(f"Нет ключевого кадра {frame_id}")

    def select_window(self, current: Keyframe, rng: np.random.Generator) -> List[Keyframe]:
        """
        Окно: текущий кадр, два последних ключевых и W−3 случайных более старых

        Args:
            current: Текущий кадр (ещё не в хранилище)
            rng: Генератор запуска

        Returns:
            min(W, 1 + len(store)) кадров, текущий первым
        """
        recent = self.keyframes[-2:][::-1]
        older = self.keyframes[:-2]
        window = [current] + recent[:self.window - 1]
        n_random = min(self.window - len(window), len(older))
        if n_random > 0:
            picks = np.sort(rng.choice(len(older), size=n_random, replace=False))
            window += [older[i] for i in picks]
        return window


def sample_pixels(intr: CameraIntrinsics, n: int, rng: np.random.Generator) -> np.ndarray:
    """n случайных различных пикселей кадра как (u, v)"""
    total = intr.width * intr.height
    idx = rng.choice(total, size=min(n, total), replace=False)
    return np.stack([idx % intr.width, idx // intr.width], axis=1).astype(np.float64)


def frame_rays(frame: FrameRGBD, pose, pixels: np.ndarray):
    """
    Лучи и наблюдения кадра в выбранных пикселях

    Args:
        frame: Кадр
        pose: PoseSE3 или (R, t) тензоры
        pixels: (M, 2) целочисленные (u, v)

    Returns:
        (origins, directions, gt_color, gt_depth вдоль луча, depth_valid)
    """
    origins, dirs, z_scale = pixels_to_rays(frame.intrinsics, pose, pixels)
    iu = pixels[:, 0].astype(np.int64)
    iv = pixels[:, 1].astype(np.int64)
    color = as_array(frame.color[iv, iu])
    valid = torch.as_tensor(frame.valid[iv, iu])
    depth = as_array(frame.depth[iv, iu]) * z_scale
    return origins, dirs, color, depth, valid


def _pose_stepper(tangents: Sequence[torch.Tensor], lr_rot: float, lr_trans: float) -> AdamStepper:
    rot = [t for i, t in enumerate(tangents) if i % 2 == 0]
    trans = [t for i, t in enumerate(tangents) if i % 2 == 1]
    return AdamStepper([{"params": rot, "lr": lr_rot}, {"params": trans, "lr": lr_trans}], lr=lr_rot)


@dataclass
class RayDraw:
    """Пиксели кадра и глубины точек вдоль их лучей, общие для всех итераций трекинга"""

    pixels: np.ndarray  # (M, 2)
    depths: np.ndarray  # (M, N) расстояния вдоль лучей


def draw_tracking_rays(
    frame: FrameRGBD,
    pose: PoseSE3,
    n_pixels: int,
    renderer: VolumeRenderer,
    field: FusionField,
    rng: np.random.Generator,
) -> RayDraw:
    """
    Одна выборка пикселей и точек для трекинга кадра

    Глубины точек заданы расстоянием вдоль луча и от позы не зависят;
    поза нужна лишь лучам без глубины (выборка по важности).
    """
    pixels = sample_pixels(frame.intrinsics, n_pixels, rng)
    origins, dirs, _, depth, valid = frame_rays(frame, pose, pixels)
    return RayDraw(pixels, renderer.draw_depths(origins, dirs, depth, valid, field, rng))


def track_frame(
    frame: FrameRGBD,
    field: FusionField,
    renderer: VolumeRenderer,
    init_pose: PoseSE3,
    track_cfg: dict,
    rng: np.random.Generator,
    frame_id: int = 0,
    hook: Optional[ReportHook] = None,
) -> PoseSE3:
    """
    Оптимизация позы кадра при замороженном поле

    Все итерации считают лосс на одной выборке лучей, поэтому keep_best
    сравнивает позы на одной и той же функции; среди кандидатов и
    стартовая поза, и поза после последнего шага.

    Args:
        frame: Кадр
        field: Поле (параметры не меняются)
        renderer: Объёмный рендерер
        init_pose: Стартовая поза
        track_cfg: Секция tracking конфига
        rng: Генератор запуска
        frame_id: Номер кадра (для логов и диагностики)
        hook: Приёмник LossReport каждой итерации

    Returns:
        Уточнённая поза
    """
    weights = LossWeights.from_dict(track_cfg["weights"])
    rot = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    trans = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    stepper = _pose_stepper([rot, trans], float(track_cfg["lr_rot"]), float(track_cfg["lr_trans"]))
    keep_best = bool(track_cfg.get("keep_best", True))
    iterations = int(track_cfg["iterations"])

    best_loss = float("inf")
    best = torch.zeros(6, dtype=DTYPE)
    with frozen(field):
        draw = draw_tracking_rays(frame, init_pose, int(track_cfg["pixels"]), renderer, field, rng)

        def evaluate(tangent: torch.Tensor):
            origins, dirs, color, depth, valid = frame_rays(frame, pose_retract(init_pose, tangent), draw.pixels)
            batch = renderer.sample_rays(origins, dirs, depth, valid, color, field, None, depths=draw.depths)
            return compute_losses(batch, weights)

        for it in range(iterations + 1):
            tangent = concat([rot, trans])
            if it == iterations:
                # Поза после последнего шага: только оценка
                with torch.no_grad():
                    _, report = evaluate(tangent)
            else:
                loss, report = evaluate(tangent)
            if not np.isfinite(report.total):
                raise TrackingDivergedError(
                    f"Кадр {frame_id}, итерация {it}: лосс {report.total}, валидных лучей {report.rays_valid}"
                )
            if report.total < best_loss:
                best_loss = report.total
                best = tangent.detach().clone()
            if it == iterations:
                break
            if hook is not None:
                hook(frame_id, "tracking", it, report)
            backward(loss)
            adam_step(stepper)

    final = best if keep_best else concat([rot, trans]).detach()
    return init_pose.retract(final.numpy())


def map_step(
    window: Sequence[Keyframe],
    field: FusionField,
    renderer: VolumeRenderer,
    field_stepper: AdamStepper,
    map_cfg: dict,
    rng: np.random.Generator,
    iterations: Optional[int] = None,
    anchor_id: int = 0,
    hook: Optional[ReportHook] = None,
) -> List[PoseSE3]:
    """
    Совместная оптимизация поля и поз окна

    Args:
        window: Кадры окна (текущий первым)
        field: Поле
        renderer: Объёмный рендерер
        field_stepper: Постоянный Adam параметров поля
        map_cfg: Секция mapping конфига
        rng: Генератор запуска
        iterations: Число итераций (по умолчанию mapping.iterations)
        anchor_id: Кадр с зафиксированной позой
        hook: Приёмник LossReport каждой итерации

    Returns:
        Новые позы кадров окна в том же порядке
    """
    if not window:
        raise ValueError("Пустое окно картирования")
    weights = LossWeights.from_dict(map_cfg["weights"])
    iterations = int(map_cfg["iterations"] if iterations is None else iterations)

    tangents = {}
    for kf in window:
        if kf.frame_id != anchor_id:
            tangents[kf.frame_id] = (
                torch.zeros(3, dtype=DTYPE, requires_grad=True),
                torch.zeros(3, dtype=DTYPE, requires_grad=True),
            )
    pose_stepper = None
    if tangents:
        flat = [t for pair in tangents.values() for t in pair]
        pose_stepper = _pose_stepper(flat, float(map_cfg["lr_rot"]), float(map_cfg["lr_trans"]))

    per_frame = max(1, int(map_cfg["pixels"]) // len(window))
    frame_id = window[0].frame_id
    for it in range(iterations):
        parts = []
        for kf in window:
            if kf.frame_id in tangents:
                pose = pose_retract(kf.pose, concat(tangents[kf.frame_id]))
            else:
                pose = kf.pose
            pixels = sample_pixels(kf.frame.intrinsics, per_frame, rng)
            parts.append(frame_rays(kf.frame, pose, pixels))
        origins, dirs, color, depth, valid = (concat(p, dim=0) for p in zip(*parts))
        batch = renderer.sample_rays(origins, dirs, depth, valid, color, field, rng)
        loss, report = compute_losses(batch, weights)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"Картирование кадра {frame_id}, итерация {it}: лосс {report.total}")
        if hook is not None:
            hook(frame_id, "mapping", it, report)
        backward(loss)
        adam_step(field_stepper)
        if pose_stepper is not None:
            adam_step(pose_stepper)

    poses = []
    for kf in window:
        if kf.frame_id in tangents:
            rot, trans = tangents[kf.frame_id]
            poses.append(kf.pose.retract(concat([rot, trans]).detach().numpy()))
        else:
            poses.append(kf.pose)
    return poses


def predict_const_speed(trajectory: Sequence[PoseSE3]) -> PoseSE3:
    """Экстраполяция с постоянной скоростью по двум последним позам"""
    if len(trajectory) < 2:
        return trajectory[-1]
    prev, last = trajectory[-2].matrix(), trajectory[-1].matrix()
    return PoseSE3.from_matrix(last @ np.linalg.inv(prev) @ last)


class SlamEngine:
    """Чередование трекинга и картирования над потоком кадров"""

    def __init__(
        self,
        cfg: dict,
        bounds,
        rng: np.random.Generator,
        hook: Optional[ReportHook] = None,
    ):
        self.cfg = cfg
        self.rng = rng
        self.hook = hook
        self.verbose = bool(cfg.get("verbose", False))
        self.field = build_field(cfg, bounds)
        self.renderer = VolumeRenderer(cfg["rendering"], bounds)
        m = cfg["mapping"]
        self.field_stepper = AdamStepper(
            self.field.param_groups(float(m["lr_planes"]), float(m["lr_decoders"])), lr=float(m["lr_decoders"])
        )
        self.keyframes = KeyframeStore(int(m["keyframe_every"]), int(m["window"]))
        self.trajectory: List[PoseSE3] = []
        self.timestamps: List[float] = []

    @property
    def frame_count(self) -> int:
        return len(self.trajectory)

    def process_frame(self, frame: FrameRGBD, init_pose: Optional[PoseSE3] = None) -> PoseSE3:
        """
        Один кадр потока: инициализация поля на первом, дальше трекинг и картирование на ключевых

        Args:
            frame: Кадр
            init_pose: Поза первого кадра (по умолчанию единичная)

        Returns:
            Поза кадра
        """
        t = self.frame_count
        m = self.cfg["mapping"]
        if t == 0:
            pose = init_pose if init_pose is not None else PoseSE3.identity()
            if self.verbose:
                print(f"🧠 Инициализация поля: {m['first_iterations']} итераций")
            map_step([Keyframe(0, frame, pose)], self.field, self.renderer, self.field_stepper, m, self.rng,
                     iterations=int(m["first_iterations"]), anchor_id=0, hook=self.hook)
            self.keyframes.add(0, frame, pose)
        else:
            if self.cfg["tracking"]["const_speed"]:
                start = predict_const_speed(self.trajectory)
            else:
                start = self.trajectory[-1]
            pose = track_frame(frame, self.field, self.renderer, start, self.cfg["tracking"], self.rng,
                               frame_id=t, hook=self.hook)
            if t % self.keyframes.interval == 0:
                current = Keyframe(t, frame, pose)
                window = self.keyframes.select_window(current, self.rng)
                new_poses = map_step(window, self.field, self.renderer, self.field_stepper, m, self.rng,
                                     anchor_id=0, hook=self.hook)
                pose = new_poses[0]
                for kf, refined in zip(window[1:], new_poses[1:]):
                    self.keyframes.update_pose(kf.frame_id, refined)
                    self.trajectory[kf.frame_id] = refined
                self.keyframes.add(t, frame, pose)

        self.trajectory.append(pose)
        self.timestamps.append(frame.timestamp)
        return pose

    def run(self, frames: Sequence[FrameRGBD], init_pose: Optional[PoseSE3] = None) -> List[PoseSE3]:
        """Весь поток; возвращает позы всех кадров"""
        if len(frames) == 0:
            raise ValueError("Пустой поток кадров")
        for frame in tqdm(frames, desc="SLAM", disable=not self.verbose):
            self.process_frame(frame, init_pose if self.frame_count == 0 else None)
        return list(self.trajectory)

    def state_dict(self) -> dict:
        return {
            "field": self.field.state_dict(),
            "optimizer": self.field_stepper.state_dict(),
            "trajectory": [p.matrix() for p in self.trajectory],
            "timestamps": list(self.timestamps),
            "keyframes": [
                {
                    "frame_id": kf.frame_id,
                    "pose": kf.pose.matrix(),
                    "color": kf.frame.color,
                    "depth": kf.frame.depth,
                    "valid": kf.frame.valid,
                    "timestamp": kf.frame.timestamp,
                }
                for kf in self.keyframes.keyframes
            ],
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict, intr: CameraIntrinsics):
        self.field.load_state_dict(state["field"])
        self.field_stepper.load_state_dict(state["optimizer"])
        self.trajectory = [PoseSE3.from_matrix(m) for m in state["trajectory"]]
        self.timestamps = list(state["timestamps"])
        self.keyframes.keyframes = []
        for kf in state["keyframes"]:
            frame = FrameRGBD(kf["color"], kf["depth"], kf["valid"], kf["timestamp"], intr)
            self.keyframes.add(kf["frame_id"], frame, PoseSE3.from_matrix(kf["pose"]))
        # Восстанавливаем состояние генератора на месте: на него ссылаются все выборки
        self.rng.bit_generator.state = state["rng"]


def run_slam(
    frames: Sequence[FrameRGBD],
    cfg: dict,
    bounds,
    rng: np.random.Generator,
    init_pose: Optional[PoseSE3] = None,
    hook: Optional[ReportHook] = None,
):
    """
    Полный SLAM над потоком

    Args:
        frames: Кадры
        cfg: Полный конфиг
        bounds: Границы сцены
        rng: Генератор запуска
        init_pose: Поза первого кадра
        hook: Приёмник LossReport

    Returns:
        (траектория, поле, движок)
    """
    engine = SlamEngine(cfg, bounds, rng, hook=hook)
    trajectory = engine.run(frames, init_pose)
    return trajectory, engine.field, engine
