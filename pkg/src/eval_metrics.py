# src/eval_metrics.py
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes
from tqdm import tqdm

from camera_pose import PoseSE3, look_at
from encoders import as_bounds
from renderer import CameraIntrinsics, pixels_to_rays
from synth_world import SynthScene, sphere_trace


class TrajectoryMismatchError(ValueError):
    """Траектории разной длины"""


@dataclass
class MetricReport:
    """Метрики в сантиметрах и процентах; None, если метрика не считалась"""

    depth_l1_cm: Optional[float] = None
    acc_cm: Optional[float] = None
    comp_cm: Optional[float] = None
    comp_ratio: Optional[float] = None
    ate_mean_cm: Optional[float] = None
    ate_rmse_cm: Optional[float] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc_cm", "comp_cm"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} должен быть >= 0, получено {value}")
        if self.comp_ratio is not None and not 0.0 <= self.comp_ratio <= 100.0:
            raise ValueError(f"comp_ratio вне [0, 100]: {self.comp_ratio}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=4, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))


def empty_mesh() -> trimesh.Trimesh:
    return trimesh.Trimesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64), process=False)


def extract_mesh(
    sdf_fn: Callable[[np.ndarray], np.ndarray],
    bounds,
    resolution: float,
) -> trimesh.Trimesh:
    """
    Marching cubes по нулевому уровню TSDF на плотной сетке

    Args:
        sdf_fn: points (N, 3) → метрическая TSDF (N,)
        bounds: Границы сетки (2, 3)
        resolution: Шаг сетки, м

    Returns:
        trimesh.Trimesh (пустой, если нуля нет)
    """
    if resolution <= 0:
        raise ValueError(f"Шаг сетки должен быть > 0, получено {resolution}")
    bounds = as_bounds(bounds)
    axes = [np.arange(lo, hi + 0.5 * resolution, resolution) for lo, hi in zip(bounds[0], bounds[1])]
    if any(len(a) < 2 for a in axes):
        raise ValueError(f"Шаг {resolution} крупнее размеров сцены")
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    volume = np.asarray(sdf_fn(grid.reshape(-1, 3)), dtype=np.float64).reshape(grid.shape[:3])

    if not np.isfinite(volume).all():
        raise FloatingPointError("TSDF содержит не-конечные значения")
    if volume.min() > 0 or volume.max() < 0:
        print("⚠️ TSDF не пересекает ноль, меш пуст")
        return empty_mesh()

    verts, faces, _, _ = marching_cubes(volume, level=0.0, spacing=(resolution,) * 3)
    return trimesh.Trimesh(vertices=verts + bounds[0], faces=faces, process=False)


def extract_field_mesh(field, tr: float, resolution: float) -> trimesh.Trimesh:
    """Меш обученного поля"""
    return extract_mesh(field.sdf_function(tr), field.bounds, resolution)


def frustum_mask(
    vertices: np.ndarray,
    poses: Sequence[PoseSE3],
    intr: CameraIntrinsics,
    bounds,
) -> np.ndarray:
    """Вершины внутри границ сцены и хотя бы одной пирамиды видимости"""
    bounds = as_bounds(bounds)
    in_bounds = np.all((vertices >= bounds[0]) & (vertices <= bounds[1]), axis=1)
    seen = np.zeros(len(vertices), dtype=bool)
    for pose in poses:
        cam = pose.inverse_transform_points(vertices)
        z = cam[:, 2]
        front = z > 1e-9
        uv = np.full((len(vertices), 2), -1.0)
        uv[front] = intr.project(cam[front])
        seen |= front & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
    return seen & in_bounds


def cull_mesh(
    mesh: trimesh.Trimesh,
    poses: Sequence[PoseSE3],
    intr: CameraIntrinsics,
    bounds,
) -> trimesh.Trimesh:
    """
    Удаление ненаблюдавшихся треугольников

    Args:
        mesh: Меш
        poses: Траектория (непустая)
        intr: Интринсики
        bounds: Границы сцены

    Returns:
        Меш из треугольников, у которых хотя бы одна вершина видна и внутри границ
    """
    if len(poses) == 0:
        raise ValueError("Пустая траектория для отсечения меша")
    if len(mesh.faces) == 0:
        return mesh
    keep_vertex = frustum_mask(np.asarray(mesh.vertices), poses, intr, bounds)
    faces = np.asarray(mesh.faces)[keep_vertex[mesh.faces].any(axis=1)]
    used, inverse = np.unique(faces.ravel(), return_inverse=True)
    return trimesh.Trimesh(
        vertices=np.asarray(mesh.vertices)[used],
        faces=inverse.reshape(-1, 3),
        process=False,
    )


Surface = Union[trimesh.Trimesh, SynthScene]


def cast_rays(surface: Surface, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Расстояние вдоль луча до первого пересечения

    Args:
        surface: Меш или аналитическая сцена
        origins, dirs: (N, 3) лучи

    Returns:
        (расстояния (N,), маска попаданий (N,))
    """
    if isinstance(surface, SynthScene):
        far = float(np.linalg.norm(surface.bounds[1] - surface.bounds[0]))
        return sphere_trace(surface, origins, dirs, far=far)

    dist = np.full(len(origins), np.inf)
    if len(surface.faces) == 0:
        return np.zeros(len(origins)), np.zeros(len(origins), dtype=bool)
    intersector = trimesh.ray.ray_triangle.RayMeshIntersector(surface)
    locations, index_ray, _ = intersector.intersects_location(origins, dirs, multiple_hits=True)
    if len(index_ray):
        d = np.linalg.norm(locations - origins[index_ray], axis=1)
        np.minimum.at(dist, index_ray, d)
    hit = np.isfinite(dist)
    return np.where(hit, dist, 0.0), hit


def render_surface_depth(surface: Surface, pose: PoseSE3, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """z-глубина поверхности с позы: (H, W) значения и маска попаданий"""
    origins, dirs, z_scale = pixels_to_rays(intr, pose, intr.all_pixels())
    dist, hit = cast_rays(surface, origins.numpy(), dirs.numpy())
    z = np.where(hit, dist / z_scale.numpy(), 0.0)
    return z.reshape(intr.height, intr.width), hit.reshape(intr.height, intr.width)


def sample_eval_views(
    bounds,
    n_views: int,
    rng: np.random.Generator,
    scene: Optional[SynthScene] = None,
    clearance: float = 0.2,
) -> List[PoseSE3]:
    """
    Случайные позы внутри границ, смотрящие на случайную точку

    Args:
        bounds: Границы сцены
        n_views: Число поз
        rng: Генератор
        scene: Если задана, камера держится на расстоянии clearance от поверхностей
        clearance: Минимальный зазор до поверхности, м

    Returns:
        Список PoseSE3
    """
    bounds = as_bounds(bounds)
    lo, hi = bounds[0] + clearance, bounds[1] - clearance
    views = []
    while len(views) < n_views:
        eye = rng.uniform(lo, hi)
        target = rng.uniform(lo, hi)
        if np.linalg.norm(target - eye) < 0.5:
            continue
        if scene is not None and scene.static_sdf(eye[None])[0] < clearance:
            continue
        forward = (target - eye) / np.linalg.norm(target - eye)
        if abs(forward[2]) > 0.95:
            continue
        views.append(look_at(eye, target))
    return views


def metric_depth_l1(
    rec_mesh: trimesh.Trimesh,
    gt: Surface,
    views: Sequence[PoseSE3],
    intr: CameraIntrinsics,
    verbose: bool = False,
) -> float:
    """
    Средняя |d̂ − d_gt| z-глубин по всем пикселям всех ракурсов, см

    Пиксели без попадания в эталон не учитываются. Промах реконструкции
    при попадании в эталон считается глубиной 0: дыры меша штрафуются
    полной глубиной эталона, их доля печатается отдельно. Ракурсы без
    попаданий в эталон исключаются.
    """
    errors = []
    excluded = 0
    holes, counted = 0, 0
    for pose in tqdm(views, desc="Depth L1", disable=not verbose):
        gt_depth, gt_hit = render_surface_depth(gt, pose, intr)
        if not gt_hit.any():
            excluded += 1
            continue
        rec_depth, rec_hit = render_surface_depth(rec_mesh, pose, intr)
        errors.append(np.abs(rec_depth[gt_hit] - gt_depth[gt_hit]))
        holes += int((gt_hit & ~rec_hit).sum())
        counted += int(gt_hit.sum())

    if excluded:
        print(f"⚠️ Ракурсов без попаданий исключено: {excluded} из {len(views)}")
    if holes:
        print(f"⚠️ Depth L1: реконструкция не видна в {holes / counted:.1%} пикселей эталона (глубина 0)")
    if not errors:
        print("⚠️ Depth L1: ни один ракурс не видит эталон")
        return float("nan")
    return float(np.concatenate(errors).mean() * 100.0)


def points_acc_comp(
    rec_points: np.ndarray,
    gt_points: np.ndarray,
    threshold: float = 0.05,
) -> Tuple[float, float, float]:
    """
    Acc, Comp (см) и Comp Ratio (%) по облакам точек

    Args:
        rec_points: P, точки реконструкции
        gt_points: Q, точки эталона
        threshold: Порог Comp Ratio, м

    Returns:
        (acc, comp, comp_ratio)
    """
    if len(rec_points) == 0 or len(gt_points) == 0:
        return float("inf"), float("inf"), 0.0
    acc_dist, _ = cKDTree(gt_points).query(rec_points)
    comp_dist, _ = cKDTree(rec_points).query(gt_points)
    ratio = float(np.mean(comp_dist < threshold) * 100.0)
    return float(acc_dist.mean() * 100.0), float(comp_dist.mean() * 100.0), ratio


def metric_acc_comp(
    rec_mesh: trimesh.Trimesh,
    gt_mesh: trimesh.Trimesh,
    n_samples: int = 200000,
    threshold: float = 0.05,
    seed: int = 0,
) -> Tuple[float, float, float]:
    """Acc/Comp/Comp Ratio по равномерным по площади выборкам поверхностей"""
    if len(rec_mesh.faces) == 0 or len(gt_mesh.faces) == 0:
        print("⚠️ Пустой меш: Acc/Comp = inf")
        return float("inf"), float("inf"), 0.0
    rec_points, _ = trimesh.sample.sample_surface(rec_mesh, n_samples, seed=seed)
    gt_points, _ = trimesh.sample.sample_surface(gt_mesh, n_samples, seed=seed + 1)
    return points_acc_comp(np.asarray(rec_points), np.asarray(gt_points), threshold)


def align_rigid(est: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Жёсткое выравнивание (масштаб 1), минимизирующее Σ‖R·est + t − gt‖²

    Returns:
        (R, t)
    """
    mu_est, mu_gt = est.mean(axis=0), gt.mean(axis=0)
    cov = (gt - mu_gt).T @ (est - mu_est) / len(est)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return rot, mu_gt - rot @ mu_est


def metric_ate(
    estimated: Sequence[PoseSE3],
    gt: Sequence[PoseSE3],
    align: bool = True,
) -> Tuple[float, float]:
    """
    ATE по переносам

    Args:
        estimated: Оценённые позы
        gt: Эталонные позы (сопоставлены по индексу)
        align: Жёстко выровнять перед сравнением

    Returns:
        (mean, rmse) в сантиметрах
    """
    if len(estimated) != len(gt):
        raise TrajectoryMismatchError(f"Длины траекторий различаются: {len(estimated)} и {len(gt)}")
    if len(estimated) == 0:
        raise TrajectoryMismatchError("Пустые траектории")
    est = np.stack([p.translation for p in estimated])
    ref = np.stack([p.translation for p in gt])
    if align:
        rot, trans = align_rigid(est, ref)
        est = est @ rot.T + trans
    err = np.linalg.norm(est - ref, axis=1)
    return float(err.mean() * 100.0), float(np.sqrt((err ** 2).mean()) * 100.0)


def frame_depth_l1(pred_depth: np.ndarray, gt_depth: np.ndarray, valid: np.ndarray) -> float:
    """Средняя |d̂ − d| по пикселям с валидной глубиной, см"""
    if not valid.any():
        return float("nan")
    return float(np.abs(pred_depth[valid] - gt_depth[valid]).mean() * 100.0)


def rendered_depth_l1(renderer, field, frames: Sequence, poses: Sequence[PoseSE3], verbose: bool = False) -> float:
    """
    Depth L1 перерендеренных кадров относительно наблюдаемой глубины, см

    Args:
        renderer: VolumeRenderer
        field: Поле
        frames: Кадры FrameRGBD
        poses: Позы, с которых рендерить

    Returns:
        Среднее по всем валидным пикселям всех кадров
    """
    total, pixels = 0.0, 0
    for frame, pose in tqdm(list(zip(frames, poses)), desc="Рендер кадров", disable=not verbose):
        n = int(frame.valid.sum())
        if n == 0:
            continue
        _, depth = renderer.render_frame(field, pose, frame.intrinsics)
        total += frame_depth_l1(depth, frame.depth, frame.valid) * n
        pixels += n
    return total / pixels if pixels else float("nan")


def psnr(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """PSNR для изображений в [0, 1]"""
    diff = (np.asarray(pred) - np.asarray(gt)) ** 2
    if mask is not None:
        diff = diff[mask]
    mse = float(diff.mean())
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def evaluate_run(
    cfg: dict,
    rec_mesh: Optional[trimesh.Trimesh],
    estimated: Optional[Sequence[PoseSE3]],
    gt_poses: Optional[Sequence[PoseSE3]],
    gt_surface: Optional[Surface],
    gt_mesh: Optional[trimesh.Trimesh],
    intr: CameraIntrinsics,
    bounds,
    rng: np.random.Generator,
) -> MetricReport:
    """
    Сборка MetricReport из того, что доступно

    Args:
        cfg: Полный конфиг (секция eval)
        rec_mesh: Отсечённый меш реконструкции
        estimated: Оценённая траектория
        gt_poses: Эталонная траектория
        gt_surface: Эталон для Depth L1 (меш или сцена)
        gt_mesh: Эталонный меш для Acc/Comp
        intr: Интринсики
        bounds: Границы сцены
        rng: Генератор ракурсов

    Returns:
        MetricReport
    """
    ev = cfg["eval"]
    report = MetricReport()
    if estimated is not None and gt_poses is not None:
        report.ate_mean_cm, report.ate_rmse_cm = metric_ate(estimated, gt_poses, align=bool(ev["align"]))
    if rec_mesh is not None and gt_surface is not None:
        scene = gt_surface if isinstance(gt_surface, SynthScene) else None
        views = sample_eval_views(bounds, int(ev["depth_l1_views"]), rng, scene=scene)
        report.depth_l1_cm = metric_depth_l1(rec_mesh, gt_surface, views, intr, verbose=cfg["verbose"])
        report.details["depth_l1_views"] = len(views)
    if rec_mesh is not None and gt_mesh is not None:
        report.acc_cm, report.comp_cm, report.comp_ratio = metric_acc_comp(
            rec_mesh, gt_mesh, int(ev["acc_comp_samples"]), float(ev["comp_ratio_threshold"]),
            seed=int(cfg["seed"]),
        )
    return report
