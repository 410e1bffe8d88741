# src/synth_world.py
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import trimesh
from tqdm import tqdm

from camera_pose import PoseSE3, look_at
from dataio import (
    DEPTH_LIST, GT_LIST, INTRINSICS_FILE, RGB_LIST,
    FrameRGBD, write_color_png, write_depth_png, write_intrinsics,
)
from renderer import CameraIntrinsics, pixels_to_rays

TRACE_TOLERANCE = 1e-5
TRACE_MAX_STEPS = 256
AMBIENT = 0.35

CHECKER_LIGHT = (0.80, 0.74, 0.62)
CHECKER_DARK = (0.30, 0.36, 0.46)

DEFAULT_OBJECTS = [
    {"kind": "sphere", "center": [0.8, 0.5, 0.35], "radius": 0.35, "albedo": [0.85, 0.25, 0.20]},
    {"kind": "box", "center": [-0.9, -0.6, 0.3], "half_size": [0.3, 0.25, 0.3], "albedo": [0.20, 0.65, 0.30]},
    {"kind": "sphere", "center": [-0.3, 0.8, 1.1], "radius": 0.2, "albedo": [0.90, 0.80, 0.15]},
]


def sphere_sdf(points: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(points - center, axis=-1) - radius


def box_sdf(points: np.ndarray, center: np.ndarray, half_size: np.ndarray) -> np.ndarray:
    q = np.abs(points - center) - half_size
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


@dataclass
class SdfPrimitive:
    kind: str
    center: np.ndarray
    size: np.ndarray  # радиус сферы или полуразмеры коробки
    albedo: np.ndarray

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"Неизвестный примитив: {self.kind}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"Размер примитива должен быть > 0: {self.size}")
        if np.any(self.albedo <= 0) or np.any(self.albedo >= 1):
            raise ValueError(f"Альбедо должно лежать в (0, 1): {self.albedo}")

    @classmethod
    def from_dict(cls, d: dict) -> "SdfPrimitive":
        size = d["radius"] if d["kind"] == "sphere" else d["half_size"]
        return cls(d["kind"], d["center"], size, d.get("albedo", [0.6, 0.6, 0.6]))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return sphere_sdf(points, self.center, float(self.size))
        return box_sdf(points, self.center, self.size)


@dataclass
class Occluder:
    """Динамический шар: центр(t) = start + velocity·t"""

    radius: float
    start: np.ndarray
    velocity: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.9]))

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    @classmethod
    def from_dict(cls, d: dict) -> "Occluder":
        return cls(float(d["radius"]), d["start"], d["velocity"], d.get("albedo", [0.1, 0.1, 0.9]))

    def center(self, t: float) -> np.ndarray:
        return self.start + self.velocity * t

    def sdf(self, points: np.ndarray, t: float) -> np.ndarray:
        return sphere_sdf(points, self.center(t), self.radius)


@dataclass
class SynthScene:
    """Комната-коробка с примитивами, клетчатыми стенами и опциональным движущимся шаром"""

    room_min: np.ndarray
    room_max: np.ndarray
    objects: List[SdfPrimitive]
    checker_period: float = 0.5
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.4, 0.85]))
    occluder: Optional[Occluder] = None
    bounds_margin: float = 0.1

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=np.float64)
        self.room_max = np.asarray(self.room_max, dtype=np.float64)
        if np.any(self.room_max <= self.room_min):
            raise ValueError(f"Вырожденная комната: {self.room_min} .. {self.room_max}")
        if self.checker_period <= 0:
            raise ValueError("checker_period должен быть > 0")
        light = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = light / np.linalg.norm(light)

    @classmethod
    def from_config(cls, scene_cfg: dict) -> "SynthScene":
        objects = scene_cfg.get("objects") or DEFAULT_OBJECTS
        occluder = scene_cfg.get("occluder")
        return cls(
            room_min=scene_cfg["room_min"],
            room_max=scene_cfg["room_max"],
            objects=[SdfPrimitive.from_dict(o) for o in objects],
            checker_period=float(scene_cfg["checker_period"]),
            light_dir=np.asarray(scene_cfg["light_dir"], dtype=np.float64),
            occluder=Occluder.from_dict(occluder) if occluder else None,
            bounds_margin=float(scene_cfg["bounds_margin"]),
        )

    @property
    def room_center(self) -> np.ndarray:
        return 0.5 * (self.room_min + self.room_max)

    @property
    def room_half(self) -> np.ndarray:
        return 0.5 * (self.room_max - self.room_min)

    @property
    def bounds(self) -> np.ndarray:
        """Границы поля: комната плюс запас"""
        return np.stack([self.room_min - self.bounds_margin, self.room_max + self.bounds_margin])

    def inside_room(self, point: np.ndarray) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p > self.room_min) and np.all(p < self.room_max))

    def components(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        """(N, K) расстояния до комнаты, объектов и (если есть) окклюдера"""
        parts = [-box_sdf(points, self.room_center, self.room_half)]
        parts += [o.sdf(points) for o in self.objects]
        if self.occluder is not None:
            parts.append(self.occluder.sdf(points, t))
        return np.stack(parts, axis=-1)

    def static_sdf(self, points: np.ndarray) -> np.ndarray:
        parts = [-box_sdf(points, self.room_center, self.room_half)] + [o.sdf(points) for o in self.objects]
        return np.min(np.stack(parts, axis=-1), axis=-1)


def scene_sdf(scene: SynthScene, points: np.ndarray, t: float = 0.0) -> np.ndarray:
    """
    Точное знаковое расстояние до ближайшей поверхности

    Args:
        scene: Сцена
        points: (N, 3) или (3,) в метрах
        t: Время, секунды (двигает окклюдер)

    Returns:
        (N,) расстояния; внутри свободного пространства комнаты > 0
    """
    points = np.asarray(points, dtype=np.float64)
    return scene.components(points.reshape(-1, 3), t).min(axis=-1).reshape(points.shape[:-1])


def scene_albedo(scene: SynthScene, points: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Альбедо ближайшего примитива; стены комнаты в шахматку"""
    comps = scene.components(points, t)
    nearest = np.argmin(comps, axis=-1)
    cells = np.floor(points / scene.checker_period).astype(np.int64).sum(axis=-1)
    albedo = np.where((cells % 2 == 0)[:, None], CHECKER_LIGHT, CHECKER_DARK)
    colors = [o.albedo for o in scene.objects]
    if scene.occluder is not None:
        colors.append(scene.occluder.albedo)
    for k, c in enumerate(colors, start=1):
        albedo[nearest == k] = c
    return albedo


def scene_normals(scene: SynthScene, points: np.ndarray, t: float = 0.0, eps: float = 1e-4) -> np.ndarray:
    """Нормали центральными разностями"""
    n = np.zeros_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = eps
        n[:, axis] = scene_sdf(scene, points + offset, t) - scene_sdf(scene, points - offset, t)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def sphere_trace(
    scene: SynthScene,
    origins: np.ndarray,
    directions: np.ndarray,
    t: float = 0.0,
    tol: float = TRACE_TOLERANCE,
    max_steps: int = TRACE_MAX_STEPS,
    far: float = 100.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Трассировка сфер

    Args:
        scene: Сцена
        origins, directions: (N, 3) лучи, направления единичные
        t: Время
        tol: Порог попадания, м
        max_steps: Максимум шагов
        far: Дальность, после которой луч считается промахом

    Returns:
        (расстояние вдоль луча (N,), маска сошедшихся лучей (N,))
    """
    dist = np.zeros(len(origins))
    hit = np.zeros(len(origins), dtype=bool)
    active = np.ones(len(origins), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        s = scene_sdf(scene, origins[idx] + directions[idx] * dist[idx, None], t)
        done = np.abs(s) < tol
        hit[idx[done]] = True
        dist[idx[~done]] += s[~done]
        active[idx[done]] = False
        active[idx[dist[idx] > far]] = False
    return dist, hit


@dataclass
class SynthFrame:
    """Кадр с эталонной позой и служебными масками"""

    frame: FrameRGBD
    pose: PoseSE3
    ray_depth: np.ndarray  # расстояние вдоль луча до поверхности
    hit: np.ndarray        # луч сошёлся к поверхности
    occluded: np.ndarray   # пиксель видит окклюдер


def corrupt_depth(
    depth: np.ndarray,
    valid: np.ndarray,
    noise: float,
    dropout: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Гауссов шум глубины (σ, м) и выпадение пикселей с вероятностью dropout"""
    depth = depth.copy()
    valid = valid.copy()
    if noise > 0:
        depth = depth + rng.normal(0.0, noise, size=depth.shape)
    if dropout > 0:
        valid &= rng.random(depth.shape) >= dropout
    valid &= depth > 0
    return depth, valid


def render_synth_frame(
    scene: SynthScene,
    pose: PoseSE3,
    intr: CameraIntrinsics,
    t: float = 0.0,
    depth_noise: float = 0.0,
    depth_dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> SynthFrame:
    """
    Рендер RGB-D кадра сцены

    Args:
        scene: Сцена
        pose: Поза камеры (должна быть внутри комнаты)
        intr: Интринсики
        t: Время кадра, секунды
        depth_noise: σ шума глубины, м
        depth_dropout: Вероятность дыры в глубине
        rng: Генератор (нужен при шуме или выпадениях)

    Returns:
        SynthFrame
    """
    if not scene.inside_room(pose.translation) or scene_sdf(scene, pose.translation, t) <= 0:
        raise ValueError(f"Камера вне свободного пространства комнаты: {pose.translation.tolist()}")

    pixels = intr.all_pixels()
    origins, dirs, z_scale = pixels_to_rays(intr, pose, pixels)
    origins, dirs, z_scale = origins.numpy(), dirs.numpy(), z_scale.numpy()
    far = float(np.linalg.norm(scene.room_max - scene.room_min))
    dist, hit = sphere_trace(scene, origins, dirs, t, far=far)

    points = origins + dirs * dist[:, None]
    color = np.zeros((len(pixels), 3))
    occluded = np.zeros(len(pixels), dtype=bool)
    if hit.any():
        p = points[hit]
        shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(scene_normals(scene, p, t) @ scene.light_dir, 0.0)
        color[hit] = np.clip(scene_albedo(scene, p, t) * shade[:, None], 0.0, 1.0)
        if scene.occluder is not None:
            comps = scene.components(p, t)
            occluded[hit] = np.argmin(comps, axis=-1) == comps.shape[1] - 1

    h, w = intr.height, intr.width
    z = np.where(hit, dist / z_scale, 0.0)
    depth, valid = z, hit.copy()
    if depth_noise > 0 or depth_dropout > 0:
        if rng is None:
            raise ValueError("Для шума глубины нужен генератор rng")
        depth, valid = corrupt_depth(z, hit, depth_noise, depth_dropout, rng)

    frame = FrameRGBD(color.reshape(h, w, 3), depth.reshape(h, w), valid.reshape(h, w), float(t), intr)
    return SynthFrame(
        frame=frame,
        pose=pose,
        ray_depth=np.where(hit, dist, 0.0).reshape(h, w),
        hit=hit.reshape(h, w),
        occluded=occluded.reshape(h, w),
    )


def make_trajectory(
    kind: str,
    n_frames: int,
    radius: float = 1.2,
    height: float = 1.3,
    target: Sequence[float] = (0.0, 0.0, 0.6),
    start_deg: float = 0.0,
    sweep_deg: float = 20.0,
    scene: Optional[SynthScene] = None,
) -> List[PoseSE3]:
    """
    Траектория камеры, смотрящей на target

    Args:
        kind: static | orbit (полный круг) | arc (дуга sweep_deg)
        n_frames: Число кадров
        radius: Радиус окружности вокруг target в плоскости XY, м
        height: Высота камеры, м
        target: Точка взгляда
        start_deg: Начальный угол, градусы
        sweep_deg: Угол дуги для arc
        scene: Если задана, проверяется, что камеры и цель внутри комнаты

    Returns:
        Список PoseSE3
    """
    if n_frames < 1:
        raise ValueError(f"n_frames должен быть >= 1, получено {n_frames}")
    if kind not in ("static", "orbit", "arc"):
        raise ValueError(f"Неизвестный тип траектории: {kind}")
    if radius <= 0:
        raise ValueError(f"radius должен быть > 0, получено {radius}")
    target = np.asarray(target, dtype=np.float64)

    start = np.deg2rad(start_deg)
    if kind == "static":
        angles = np.full(n_frames, start)
    elif kind == "orbit":
        angles = start + 2.0 * np.pi * np.arange(n_frames) / n_frames
    else:
        steps = np.arange(n_frames) / max(n_frames - 1, 1)
        angles = start + np.deg2rad(sweep_deg) * steps

    poses = []
    for a in angles:
        eye = np.array([target[0] + radius * np.cos(a), target[1] + radius * np.sin(a), height])
        if scene is not None and not (scene.inside_room(eye) and scene.inside_room(target)):
            raise ValueError(f"Траектория выходит из комнаты: eye={eye.tolist()}")
        poses.append(look_at(eye, target))
    return poses


def trajectory_from_config(scene_cfg: dict, scene: Optional[SynthScene] = None) -> List[PoseSE3]:
    tr = scene_cfg["trajectory"]
    return make_trajectory(
        tr["kind"], int(tr["n_frames"]), float(tr["radius"]), float(tr["height"]),
        tr["target"], float(tr["start_deg"]), float(tr["sweep_deg"]), scene=scene,
    )


def synth_sequence(cfg: dict, intr: CameraIntrinsics, rng: np.random.Generator) -> Tuple[SynthScene, List[SynthFrame]]:
    """
    Сцена и кадры по секции scene конфига

    Args:
        cfg: Полный конфиг
        intr: Интринсики
        rng: Генератор запуска (шум глубины)

    Returns:
        (SynthScene, список SynthFrame)
    """
    scene_cfg = cfg["scene"]
    scene = SynthScene.from_config(scene_cfg)
    poses = trajectory_from_config(scene_cfg, scene)
    fps = float(scene_cfg["fps"])
    frames = [
        render_synth_frame(
            scene, pose, intr, t=i / fps,
            depth_noise=float(scene_cfg["depth_noise"]),
            depth_dropout=float(scene_cfg["depth_dropout"]),
            rng=rng,
        )
        for i, pose in enumerate(tqdm(poses, desc="Синтетические кадры"))
    ]
    return scene, frames


def scene_mesh(scene: SynthScene, resolution: float = 0.02, t: Optional[float] = None) -> trimesh.Trimesh:
    """
    Эталонный меш сцены: marching cubes по аналитической SDF

    Args:
        scene: Сцена
        resolution: Шаг сетки, м
        t: Время; None даёт только статическую часть (без окклюдера)

    Returns:
        trimesh.Trimesh
    """
    from eval_metrics import extract_mesh

    if t is None:
        sdf_fn = scene.static_sdf
    else:
        def sdf_fn(points):
            return scene_sdf(scene, points, t)
    return extract_mesh(sdf_fn, scene.bounds, resolution)


def write_tum_dataset(
    out_dir,
    frames: Sequence[SynthFrame],
    intr: CameraIntrinsics,
) -> Path:
    """
    Запись кадров в раскладке TUM RGB-D (rgb/, depth/, списки, groundtruth.txt, intrinsics.yaml)

    Args:
        out_dir: Целевая папка
        frames: Синтетические кадры
        intr: Интринсики (depth_scale задаёт единицы PNG глубины)

    Returns:
        Путь к датасету
    """
    root = Path(out_dir)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    print(f"💾 Пишем синтетический датасет в {root}")

    rgb_lines, depth_lines, gt_lines = [], [], []
    for sf in tqdm(frames, desc="Запись кадров"):
        ts = f"{sf.frame.timestamp:.6f}"
        write_color_png(root / "rgb" / f"{ts}.png", sf.frame.color)
        write_depth_png(root / "depth" / f"{ts}.png", np.where(sf.frame.valid, sf.frame.depth, 0.0),
                        intr.depth_scale)
        rgb_lines.append(f"{ts} rgb/{ts}.png")
        depth_lines.append(f"{ts} depth/{ts}.png")
        gt_lines.append(ts + " " + " ".join(f"{v:.9f}" for v in sf.pose.to_tum()))

    for name, header, lines in (
        (RGB_LIST, "# timestamp filename", rgb_lines),
        (DEPTH_LIST, "# timestamp filename", depth_lines),
        (GT_LIST, "# timestamp tx ty tz qx qy qz qw", gt_lines),
    ):
        (root / name).write_text("\n".join([header] + lines) + "\n", encoding="utf-8")
    write_intrinsics(root / INTRINSICS_FILE, intr)

    print(f"✅ Записано кадров: {len(frames)}")
    return root
