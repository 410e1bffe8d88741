from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from tensor_core import DTYPE

SMALL_ANGLE2 = 1e-8


def skew(w: torch.Tensor) -> torch.Tensor:
    """Кососимметричная матрица [w]x"""
    zero = torch.zeros((), dtype=w.dtype)
    return torch.stack([
        torch.stack([zero, -w[2], w[1]]),
        torch.stack([w[2], zero, -w[0]]),
        torch.stack([-w[1], w[0], zero]),
    ])


def rodrigues(w: torch.Tensor) -> torch.Tensor:
    """
    Формула Родрига: ось-угол → матрица поворота (дифференцируемо, включая w = 0)

    Args:
        w: (3,) вектор ось-угол, радианы

    Returns:
        (3, 3) матрица поворота
    """
    theta2 = (w * w).sum()
    small = theta2 < SMALL_ANGLE2
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    k = skew(w)
    return torch.eye(3, dtype=w.dtype) + a * k + b * (k @ k)


def orthonormalize(rot: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Ближайшая матрица поворота (SVD), det = +1; уже ортонормированную не трогаем"""
    if np.abs(rot.T @ rot - np.eye(3)).max() < tol and np.linalg.det(rot) > 0:
        return rot.copy()
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass
class PoseSE3:
    """Поза камеры camera-to-world: R (3x3), t (3,) в метрах"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = orthonormalize(np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "PoseSE3":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.as_tensor(self.rotation, dtype=DTYPE),
            torch.as_tensor(self.translation, dtype=DTYPE),
        )

    def retract(self, tangent: Sequence[float]) -> "PoseSE3":
        """Численная версия pose_retract"""
        with torch.no_grad():
            rot, trans = pose_retract(self, torch.as_tensor(np.asarray(tangent, dtype=np.float64)))
        return PoseSE3(rot.numpy(), trans.numpy())

    def to_tum(self) -> np.ndarray:
        """(tx, ty, tz, qx, qy, qz, qw)"""
        quat = Rotation.from_matrix(self.rotation).as_quat()
        return np.concatenate([self.translation, quat])

    @classmethod
    def from_tum(cls, values: Sequence[float]) -> "PoseSE3":
        values = np.asarray(values, dtype=np.float64)
        return cls(Rotation.from_quat(values[3:7]).as_matrix(), values[:3])

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Камера → мир"""
        return points @ self.rotation.T + self.translation

    def inverse_transform_points(self, points: np.ndarray) -> np.ndarray:
        """Мир → камера"""
        return (points - self.translation) @ self.rotation


def pose_retract(base: PoseSE3, tangent: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Ретракция касательного вектора (ось-угол ‖ сдвиг) на базовую позу

    Args:
        base: Базовая поза
        tangent: (6,), первые 3 ось-угол, последние 3 приращение переноса

    Returns:
        (R (3, 3), t (3,)), дифференцируемо по tangent
    """
    rot0, trans0 = base.tensors()
    rot = rot0 @ rodrigues(tangent[:3])
    trans = trans0 + tangent[3:6]
    return rot, trans


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> PoseSE3:
    """
    Поза камеры, смотрящей из eye в target (x вправо, y вниз, z вперёд)

    Args:
        eye: Положение камеры
        target: Точка взгляда
        up: Мировой вектор «вверх»

    Returns:
        PoseSE3
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("look_at: камера совпадает с целью")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("look_at: направление взгляда параллельно вектору up")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return PoseSE3(np.stack([right, down, forward], axis=1), eye)
