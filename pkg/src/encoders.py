import math
from typing import Dict, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tensor_core import DTYPE

PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
LEVELS = ("coarse", "fine")
KINDS = ("geometry", "appearance")


def as_bounds(bounds) -> np.ndarray:
    """
    Приведение границ сцены к массиву (2, 3): [min, max]

    Args:
        bounds: Пара точек или массив (2, 3) в метрах

    Returns:
        np.ndarray формы (2, 3)
    """
    arr = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    extent = arr[1] - arr[0]
    if np.any(~np.isfinite(arr)) or np.any(extent <= 0):
        raise ValueError(f"Вырожденные границы сцены: {arr.tolist()}")
    return arr


def normalize_points(points: torch.Tensor, bounds: np.ndarray) -> torch.Tensor:
    """Нормализация в [0, 1] по каждой оси с обрезкой по границам"""
    lo = torch.as_tensor(bounds[0], dtype=DTYPE)
    hi = torch.as_tensor(bounds[1], dtype=DTYPE)
    return ((points - lo) / (hi - lo)).clamp(0.0, 1.0)


class OneBlobEncoder:
    """
    Глобальное кодирование One-blob: гауссово ядро по бинам каждой оси.

    Ширина ядра равна ширине бина, ядро вычисляется в центрах бинов
    (без интегрирования и без нормировки суммы на 1).
    """

    def __init__(self, bounds, bins: int = 16):
        if bins < 1:
            raise ValueError(f"Число бинов должно быть >= 1, получено {bins}")
        self.bounds = as_bounds(bounds)
        self.bins = bins
        self.sigma = 1.0 / bins
        self.centers = (torch.arange(bins, dtype=DTYPE) + 0.5) / bins

    @property
    def out_dim(self) -> int:
        return 3 * self.bins

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """
        Кодирование точек

        Args:
            points: (N, 3) в метрах

        Returns:
            (N, 3 * bins), значения в [0, 1]
        """
        x = normalize_points(points, self.bounds)
        diff = x.unsqueeze(-1) - self.centers
        act = torch.exp(-0.5 * (diff / self.sigma) ** 2)
        return act.reshape(points.shape[0], self.out_dim)


class FeaturePlaneSet(nn.Module):
    """
    Локальное представление: иерархические плоскости признаков XY/XZ/YZ
    для геометрии и внешнего вида, грубый и точный уровни.
    """

    def __init__(
        self,
        bounds,
        feature_dim: int = 24,
        geometry_res: Sequence[float] = (0.24, 0.06),
        appearance_res: Sequence[float] = (0.24, 0.03),
        init_std: float = 0.01,
        seed: int = 0,
    ):
        super().__init__()
        self.bounds = as_bounds(bounds)
        self.feature_dim = feature_dim
        self.resolution = {
            "geometry": dict(zip(LEVELS, geometry_res)),
            "appearance": dict(zip(LEVELS, appearance_res)),
        }
        gen = torch.Generator().manual_seed(seed)
        extent = self.bounds[1] - self.bounds[0]

        self.planes = nn.ParameterDict()
        self.spans: Dict[str, np.ndarray] = {}
        for kind in KINDS:
            for level in LEVELS:
                res = float(self.resolution[kind][level])
                if res <= 0:
                    raise ValueError(f"Разрешение плоскости должно быть > 0: {kind}/{level}={res}")
                nodes = np.array([math.ceil(e / res - 1e-9) + 1 for e in extent])
                self.spans[f"{kind}_{level}"] = (nodes - 1) * res
                for name, (a, b) in PLANE_AXES.items():
                    # (1, C, H, W): W идёт вдоль первой оси плоскости, H вдоль второй
                    shape = (1, feature_dim, int(nodes[b]), int(nodes[a]))
                    init = torch.randn(shape, generator=gen, dtype=DTYPE) * init_std
                    self.planes[self.plane_key(kind, level, name)] = nn.Parameter(init)

    @staticmethod
    def plane_key(kind: str, level: str, plane: str) -> str:
        return f"{kind}_{level}_{plane}"

    @property
    def out_dim(self) -> int:
        return 2 * self.feature_dim

    def grid_coords(self, points: torch.Tensor, kind: str, level: str) -> torch.Tensor:
        """Координаты точек в системе grid_sample ([-1, 1], узлы по углам)"""
        lo = torch.as_tensor(self.bounds[0], dtype=DTYPE)
        hi = torch.as_tensor(self.bounds[1], dtype=DTYPE)
        span = torch.as_tensor(self.spans[f"{kind}_{level}"], dtype=DTYPE)
        p = torch.maximum(torch.minimum(points, hi), lo)
        return (p - lo) / span * 2.0 - 1.0

    def query(self, points: torch.Tensor, which: str) -> torch.Tensor:
        """
        Билинейный запрос признаков (сумма по трём плоскостям, concat уровней)

        Args:
            points: (N, 3) в метрах
            which: 'geometry' или 'appearance'

        Returns:
            (N, 2 * feature_dim)
        """
        if which not in KINDS:
            raise ValueError(f"Неизвестный тип плоскостей: {which}")
        feats = []
        for level in LEVELS:
            g = self.grid_coords(points, which, level)
            level_feat = 0.0
            for name, (a, b) in PLANE_AXES.items():
                plane = self.planes[self.plane_key(which, level, name)]
                grid = g[:, [a, b]].reshape(1, -1, 1, 2)
                sampled = F.grid_sample(
                    plane, grid, mode="bilinear", padding_mode="border", align_corners=True
                )
                level_feat = level_feat + sampled[0, :, :, 0].transpose(0, 1)
            feats.append(level_feat)
        return torch.cat(feats, dim=-1)

    def zero_(self):
        """Обнуление всех признаков (путь абляции без локальной части)"""
        with torch.no_grad():
            for p in self.planes.values():
                p.zero_()
