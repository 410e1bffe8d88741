from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

from camera_pose import PoseSE3
from tensor_core import DTYPE, EPS_DIV, mul, safe_reciprocal, sigmoid, square, sum_

# Минимальный шаг между соседними точками луча, м
MIN_SAMPLE_GAP = 1e-6


@dataclass
class CameraIntrinsics:
    """Пинхол-камера: фокусы и главная точка в пикселях, масштаб сырой глубины"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Фокусные расстояния должны быть > 0: fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"Главная точка ({self.cx}, {self.cy}) вне кадра {self.width}x{self.height}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            depth_scale=float(d.get("depth_scale", 5000.0)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def all_pixels(self) -> np.ndarray:
        """Все пиксели кадра построчно: (H*W, 2) как (u, v)"""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Проекция точек в системе камеры → (u, v)"""
        z = points_cam[:, 2]
        u = self.fx * points_cam[:, 0] / z + self.cx
        v = self.fy * points_cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)


@dataclass
class RaySampleBatch:
    """Точки вдоль лучей и предсказания поля в них"""

    origins: torch.Tensor      # (R, 3)
    directions: torch.Tensor   # (R, 3), единичные
    depths: torch.Tensor       # (R, N) расстояния вдоль луча, по возрастанию
    colors: torch.Tensor       # (R, N, 3)
    sdf: torch.Tensor          # (R, N) в единицах усечения
    weights: torch.Tensor      # (R, N)
    gt_color: torch.Tensor     # (R, 3)
    gt_depth: torch.Tensor     # (R,) расстояние вдоль луча
    depth_valid: torch.Tensor  # (R,) bool
    truncation: float

    @property
    def num_rays(self) -> int:
        return self.depths.shape[0]

    @property
    def metric_sdf(self) -> torch.Tensor:
        return self.sdf * self.truncation


@dataclass
class RenderOutput:
    color: torch.Tensor      # (R, 3)
    depth: torch.Tensor      # (R,)
    depth_var: torch.Tensor  # (R,)


PoseLike = Union[PoseSE3, Tuple[torch.Tensor, torch.Tensor]]


def pixels_to_rays(
    intr: CameraIntrinsics,
    pose: PoseLike,
    pixels: np.ndarray,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Лучи через пиксели (камера: x вправо, y вниз, z вперёд)

    Args:
        intr: Интринсики
        pose: PoseSE3 или пара тензоров (R, t); во втором случае лучи дифференцируемы по позе
        pixels: (N, 2) координаты (u, v)

    Returns:
        (origins (N, 3), directions (N, 3), z_scale (N,)); расстояние вдоль луча = z * z_scale
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(u > intr.width - 1) or np.any(v < 0) or np.any(v > intr.height - 1):
        raise ValueError(f"Пиксели вне кадра {intr.width}x{intr.height}")

    rot, trans = pose.tensors() if isinstance(pose, PoseSE3) else pose
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=1)
    norm = np.linalg.norm(cam, axis=1)
    cam_dirs = torch.as_tensor(cam / norm[:, None], dtype=DTYPE)

    directions = cam_dirs @ rot.transpose(0, 1)
    origins = trans.unsqueeze(0).expand(len(pixels), 3)
    return origins, directions, torch.as_tensor(norm, dtype=DTYPE)


def tsdf_to_weight(sdf: torch.Tensor, tr: float) -> torch.Tensor:
    """
    Колоколообразный вес из метрической TSDF: σ(s/tr)·σ(−s/tr)

    Args:
        sdf: Метрическая TSDF
        tr: Расстояние усечения, м

    Returns:
        Веса в (0, 0.25]
    """
    if tr <= 0:
        raise ValueError(f"Расстояние усечения должно быть > 0, получено {tr}")
    x = sdf / tr
    return mul(sigmoid(x), sigmoid(-x))


def render(batch: RaySampleBatch) -> RenderOutput:
    """
    Нормированное взвешенное среднее цвета и глубины, дисперсия глубины

    Args:
        batch: Точки с весами

    Returns:
        RenderOutput на каждый луч
    """
    w = batch.weights
    inv = safe_reciprocal(sum_(w, dim=-1), EPS_DIV)
    color = mul(sum_(mul(w.unsqueeze(-1), batch.colors), dim=-2), inv.unsqueeze(-1))
    depth = mul(sum_(mul(w, batch.depths), dim=-1), inv)
    depth_var = mul(sum_(mul(w, square(batch.depths - depth.unsqueeze(-1))), dim=-1), inv)
    return RenderOutput(color=color, depth=depth, depth_var=depth_var)


def strictly_ascending(t: np.ndarray) -> np.ndarray:
    """Отсортированные глубины (R, N) без совпадающих соседей: шаг не меньше MIN_SAMPLE_GAP"""
    t = np.sort(t, axis=1)
    gaps = np.diff(t, axis=1)
    if np.all(gaps >= MIN_SAMPLE_GAP):
        return t
    steps = np.cumsum(np.maximum(gaps, MIN_SAMPLE_GAP), axis=1)
    return np.concatenate([t[:, :1], t[:, :1] + steps], axis=1)


def stratified_depths(near: float, far: float, n: int, rng: np.random.Generator, num_rays: int) -> np.ndarray:
    """По одной равномерной выборке в каждом из n равных подынтервалов"""
    if near >= far:
        raise ValueError(f"near ({near}) должен быть меньше far ({far})")
    edges = np.linspace(near, far, n + 1)
    u = rng.random((num_rays, n))
    return edges[:-1] + (edges[1:] - edges[:-1]) * u


def importance_resample(
    edges: np.ndarray,
    weights: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Обратная CDF по кусочно-постоянной плотности весов

    Args:
        edges: (R, K+1) границы интервалов
        weights: (R, K) веса интервалов
        n: Число новых точек на луч
        rng: Генератор

    Returns:
        (R, n) глубины
    """
    weights = weights + 1e-5
    pdf = weights / weights.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    u = rng.random((len(pdf), n))
    out = np.empty_like(u)
    for r in range(len(pdf)):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, pdf.shape[1] - 1)
        frac = (u[r] - cdf[r, idx]) / np.maximum(pdf[r, idx], 1e-12)
        out[r] = edges[r, idx] + np.clip(frac, 0.0, 1.0) * (edges[r, idx + 1] - edges[r, idx])
    return out


class VolumeRenderer:
    """Выборка точек вдоль лучей и объёмный рендер TSDF-поля"""

    def __init__(self, render_cfg: dict, bounds: np.ndarray):
        self.tr = float(render_cfg["truncation"])
        self.n_strat = int(render_cfg["n_strat"])
        self.n_imp = int(render_cfg["n_imp"])
        self.near = float(render_cfg["near"])
        diagonal = float(np.linalg.norm(np.asarray(bounds)[1] - np.asarray(bounds)[0]))
        self.far = float(render_cfg["far"]) if render_cfg.get("far") is not None else diagonal
        self.chunk = int(render_cfg.get("chunk", 4096))
        if self.near <= 0:
            raise ValueError(f"near должен быть > 0, получено {self.near}")
        if self.near >= self.far:
            raise ValueError(f"near ({self.near}) должен быть меньше far ({self.far})")

    def draw_depths(
        self,
        origins: torch.Tensor,
        directions: torch.Tensor,
        gt_depth: torch.Tensor,
        depth_valid: torch.Tensor,
        field,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """
        Глубины точек вдоль лучей: N_strat стратифицированных + N_imp
        равномерно в полосе усечения (лучи с глубиной) или по важности (без глубины)

        Args:
            origins, directions: Лучи (R, 3)
            gt_depth: (R,) наблюдаемая глубина вдоль луча
            depth_valid: (R,) маска валидной глубины
            field: Неявное поле (только для лучей без глубины)
            rng: Генератор запуска

        Returns:
            (R, N_strat + N_imp) строго возрастающие глубины, не ближе near
        """
        num_rays = origins.shape[0]
        t_strat = stratified_depths(self.near, self.far, self.n_strat, rng, num_rays)
        valid = depth_valid.detach().cpu().numpy().astype(bool)
        gt = gt_depth.detach().cpu().numpy()

        extra = np.empty((num_rays, self.n_imp))
        if self.n_imp > 0:
            # Полоса [d − tr, d + tr], обрезанная снизу по near
            lo = np.maximum(gt - self.tr, self.near)
            hi = np.maximum(gt + self.tr, lo + self.tr)
            u = rng.random((num_rays, self.n_imp))
            extra[:] = lo[:, None] + (hi - lo)[:, None] * u
            if np.any(~valid):
                extra[~valid] = self._importance(origins, directions, t_strat, ~valid, field, rng)
        return strictly_ascending(np.concatenate([t_strat, extra], axis=1))

    def sample_rays(
        self,
        origins: torch.Tensor,
        directions: torch.Tensor,
        gt_depth: torch.Tensor,
        depth_valid: torch.Tensor,
        gt_color: torch.Tensor,
        field,
        rng: Optional[np.random.Generator],
        depths: Optional[np.ndarray] = None,
    ) -> RaySampleBatch:
        """
        Точки вдоль лучей и предсказания поля в них

        Args:
            origins, directions: Лучи (R, 3)
            gt_depth: (R,) наблюдаемая глубина вдоль луча
            depth_valid: (R,) маска валидной глубины
            gt_color: (R, 3) наблюдаемый цвет
            field: Неявное поле (FusionField)
            rng: Генератор запуска (не нужен, если depths заданы)
            depths: Готовые глубины из draw_depths; иначе выбираются заново

        Returns:
            RaySampleBatch с N_strat + N_imp точками на каждом луче
        """
        num_rays = origins.shape[0]
        if depths is None:
            depths = self.draw_depths(origins, directions, gt_depth, depth_valid, field, rng)
        elif depths.shape[0] != num_rays:
            raise ValueError(f"Глубин на {depths.shape[0]} лучей, лучей {num_rays}")
        depths = torch.as_tensor(depths, dtype=DTYPE)

        points = origins.unsqueeze(1) + directions.unsqueeze(1) * depths.unsqueeze(-1)
        colors, sdf = field(points.reshape(-1, 3))
        n = depths.shape[1]
        colors = colors.reshape(num_rays, n, 3)
        sdf = sdf.reshape(num_rays, n)
        weights = tsdf_to_weight(sdf * self.tr, self.tr)
        return RaySampleBatch(
            origins=origins, directions=directions, depths=depths, colors=colors, sdf=sdf,
            weights=weights, gt_color=gt_color, gt_depth=gt_depth,
            depth_valid=depth_valid.bool(), truncation=self.tr,
        )

    def _importance(self, origins, directions, t_strat, mask, field, rng) -> np.ndarray:
        idx = np.nonzero(mask)[0]
        t = torch.as_tensor(t_strat[idx], dtype=DTYPE)
        with torch.no_grad():
            o = origins.detach()[idx]
            d = directions.detach()[idx]
            pts = o.unsqueeze(1) + d.unsqueeze(1) * t.unsqueeze(-1)
            _, sdf = field(pts.reshape(-1, 3))
            w = tsdf_to_weight(sdf.reshape(t.shape) * self.tr, self.tr).numpy()
        edges = np.linspace(self.near, self.far, self.n_strat + 1)
        edges = np.broadcast_to(edges, (len(idx), self.n_strat + 1))
        return importance_resample(edges, w, self.n_imp, rng)

    def render_frame(
        self,
        field,
        pose: PoseSE3,
        intr: CameraIntrinsics,
        seed: int = 0,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Полный кадр с новой позы (без наблюдаемой глубины)

        Первый проход по важности оценивает поверхность, второй выбирает
        точки так же, как трекинг: стратифицированно и в полосе усечения
        вокруг этой оценки.

        Args:
            field: Неявное поле
            pose: Поза камеры
            intr: Интринсики
            seed: Зерно выборки вдоль лучей

        Returns:
            (цвет (H, W, 3) в [0, 1], z-глубина (H, W) в метрах)
        """
        rng = np.random.default_rng(seed)
        pixels = intr.all_pixels()
        colors = np.empty((len(pixels), 3))
        depth = np.empty(len(pixels))
        for i in range(0, len(pixels), self.chunk):
            px = pixels[i:i + self.chunk]
            origins, dirs, z_scale = pixels_to_rays(intr, pose, px)
            n = len(px)
            no_color = torch.zeros(n, 3, dtype=DTYPE)
            with torch.no_grad():
                coarse = self.sample_rays(
                    origins, dirs, torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=torch.bool),
                    no_color, field, rng,
                )
                surface = render(coarse).depth
                batch = self.sample_rays(
                    origins, dirs, surface, torch.ones(n, dtype=torch.bool), no_color, field, rng,
                )
                out = render(batch)
            colors[i:i + n] = out.color.numpy()
            depth[i:i + n] = (out.depth / z_scale).numpy()
        return colors.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)
