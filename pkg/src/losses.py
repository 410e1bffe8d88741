from dataclasses import dataclass, asdict, fields
from typing import Dict, Tuple

import torch

from renderer import RaySampleBatch, RenderOutput, render
from tensor_core import ShapeMismatchError, mean, mul, square, sum_

TERM_NAMES = ("rgb", "depth", "sdf_near", "sdf_far", "fs", "ic")
NEAR_FRACTION = 0.4


@dataclass
class LossWeights:
    """Веса λ шести слагаемых лосса"""

    rgb: float
    depth: float
    sdf_near: float
    sdf_far: float
    fs: float
    ic: float

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if value < 0:
                raise ValueError(f"Вес лосса {f.name} должен быть >= 0, получено {value}")
            setattr(self, f.name, value)

    @classmethod
    def tracking(cls) -> "LossWeights":
        return cls(rgb=5.0, depth=1.0, sdf_near=200.0, sdf_far=50.0, fs=5.0, ic=0.0)

    @classmethod
    def mapping(cls) -> "LossWeights":
        return cls(rgb=5.0, depth=0.1, sdf_near=200.0, sdf_far=10.0, fs=5.0, ic=0.05)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{name: d[name] for name in TERM_NAMES})


@dataclass
class SamplePartition:
    """Маски (R, N) по отношению к наблюдаемой поверхности; у лучей без глубины все False"""

    near: torch.Tensor
    far: torch.Tensor
    outside: torch.Tensor

    @property
    def inside(self) -> torch.Tensor:
        return self.near | self.far


@dataclass
class LossReport:
    rgb: float
    depth: float
    sdf_near: float
    sdf_far: float
    fs: float
    ic: float
    total: float
    rays: int
    rays_valid: int
    depth_empty: bool = False
    empty_truncation_rays: int = 0

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("depth_empty")
        row.pop("empty_truncation_rays")
        return row


def partition_samples(batch: RaySampleBatch) -> SamplePartition:
    """
    Разбиение точек луча по расстоянию до наблюдаемой глубины

    Args:
        batch: Лучи с точками

    Returns:
        SamplePartition: near (|d − d_p| < 0.4·tr), far (остаток полосы tr), outside (всё прочее)
    """
    gap = (batch.gt_depth.detach().unsqueeze(-1) - batch.depths).abs()
    valid = batch.depth_valid.unsqueeze(-1).expand_as(gap)
    tr = batch.truncation
    inside = (gap < tr) & valid
    near = (gap < NEAR_FRACTION * tr) & valid
    return SamplePartition(near=near, far=inside & ~near, outside=valid & ~inside)


def _ray_mean(values: torch.Tensor, mask: torch.Tensor, ray_mask: torch.Tensor) -> torch.Tensor:
    """Среднее по лучам ray_mask от средних по точкам mask; пустое множество даёт 0"""
    n_rays = int(ray_mask.sum())
    if n_rays == 0:
        return values.new_zeros(())
    m = mask.to(values.dtype)
    per_ray = sum_(mul(values, m), dim=-1) / m.sum(dim=-1).clamp(min=1.0)
    return sum_(per_ray[ray_mask]) / n_rays


def loss_rgb_depth(
    out: RenderOutput,
    gt_color: torch.Tensor,
    gt_depth: torch.Tensor,
    depth_valid: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Лоссы рендера цвета и глубины

    Args:
        out: Рендер лучей
        gt_color: (M, 3) наблюдаемый цвет
        gt_depth: (M,) наблюдаемая глубина вдоль луча
        depth_valid: (M,) маска

    Returns:
        (L_rgb: среднее по M лучам и каналам, L_d: среднее по M_d лучам; 0 если M_d = 0)
    """
    if out.color.shape[0] == 0:
        raise ValueError("Пустой набор лучей (M = 0)")
    if out.color.shape != gt_color.shape:
        raise ShapeMismatchError("loss_rgb_depth", out.color.shape, gt_color.shape)

    l_rgb = mean(square(out.color - gt_color))
    valid = depth_valid.bool()
    if not bool(valid.any()):
        return l_rgb, out.depth.new_zeros(())
    l_depth = mean(square(out.depth[valid] - gt_depth[valid]))
    return l_rgb, l_depth


def loss_tsdf(batch: RaySampleBatch, partition: SamplePartition) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    TSDF-лоссы в метрах: ближняя и дальняя часть полосы усечения и свободное пространство

    Args:
        batch: Лучи с предсказанной TSDF
        partition: Разбиение точек

    Returns:
        (Lⁿ_sdf, Lᶠ_sdf, L_fs)
    """
    tr = batch.truncation
    pred = batch.metric_sdf
    target = batch.gt_depth.unsqueeze(-1) - batch.depths
    sdf_err = square(pred - target)
    fs_err = square(pred - tr)
    valid = batch.depth_valid
    return (
        _ray_mean(sdf_err, partition.near, valid),
        _ray_mean(sdf_err, partition.far, valid),
        _ray_mean(fs_err, partition.outside, valid),
    )


def loss_info_concentration(out: RenderOutput, depth_valid: torch.Tensor) -> torch.Tensor:
    """Средняя дисперсия глубины по лучам с валидной глубиной"""
    valid = depth_valid.bool()
    if not bool(valid.any()):
        return out.depth_var.new_zeros(())
    return mean(out.depth_var[valid])


def loss_total(terms: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Взвешенная сумма слагаемых"""
    total = 0.0
    for name in TERM_NAMES:
        total = total + getattr(weights, name) * terms[name]
    return torch.as_tensor(total) if not torch.is_tensor(total) else total


def compute_losses(batch: RaySampleBatch, weights: LossWeights) -> Tuple[torch.Tensor, LossReport]:
    """
    Рендер пачки и все шесть слагаемых

    Args:
        batch: Лучи с точками
        weights: Веса (пресет трекинга или картирования)

    Returns:
        (скалярный лосс с графом, LossReport)
    """
    out = render(batch)
    partition = partition_samples(batch)
    l_rgb, l_depth = loss_rgb_depth(out, batch.gt_color, batch.gt_depth, batch.depth_valid)
    l_near, l_far, l_fs = loss_tsdf(batch, partition)
    terms = {
        "rgb": l_rgb,
        "depth": l_depth,
        "sdf_near": l_near,
        "sdf_far": l_far,
        "fs": l_fs,
        "ic": loss_info_concentration(out, batch.depth_valid),
    }
    total = loss_total(terms, weights)

    n_valid = int(batch.depth_valid.sum())
    empty_in = int((~partition.inside.any(dim=-1) & batch.depth_valid).sum())
    report = LossReport(
        **{name: float(value.detach()) for name, value in terms.items()},
        total=float(total.detach()),
        rays=batch.num_rays,
        rays_valid=n_valid,
        depth_empty=n_valid == 0,
        empty_truncation_rays=empty_in,
    )
    return total, report
