import math
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from encoders import FeaturePlaneSet, OneBlobEncoder, as_bounds
from tensor_core import DTYPE, ShapeMismatchError, add, concat, matmul, mean, relu, sigmoid, softmax, tanh

# Режимы абляции: без локальной или глобальной части, без внимания,
# без слияния результатов, конкатенация вместо внимания
FUSION_MODES = ("full", "global_only", "local_only", "no_attention", "no_result_fusion", "concat")


def attention_fuse(local: torch.Tensor, global_feat: torch.Tensor) -> torch.Tensor:
    """
    Слияние признаков самовниманием по двум токенам (локальный, глобальный)

    Args:
        local: (..., d) признаки плоскостей
        global_feat: (..., d) кодирование One-blob

    Returns:
        (..., d): среднее двух выходных токенов softmax(T Tᵀ/√d) T
    """
    if local.shape != global_feat.shape:
        raise ShapeMismatchError("attention_fuse", local.shape, global_feat.shape)
    tokens = torch.stack([local, global_feat], dim=-2)
    d = tokens.shape[-1]
    scores = matmul(tokens, tokens.transpose(-1, -2)) / math.sqrt(d)
    return mean(matmul(softmax(scores, dim=-1), tokens), dim=-2)


class Decoder(nn.Module):
    """Двухслойный MLP: Linear → ReLU → Linear → sigmoid/tanh"""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, out_act: str, final_bias: float = 0.0):
        super().__init__()
        if out_act not in ("sigmoid", "tanh"):
            raise ValueError(f"Неизвестная выходная активация: {out_act}")
        self.hidden = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, out_dim, dtype=DTYPE)
        self.out_act = out_act
        if final_bias:
            with torch.no_grad():
                self.out.bias.fill_(final_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.out(relu(self.hidden(x)))
        return sigmoid(y) if self.out_act == "sigmoid" else tanh(y)


class FusionField(nn.Module):
    """
    Локально-глобальное неявное представление: точка → (цвет, TSDF).

    TSDF выдаётся в единицах усечения (диапазон tanh); метрическое
    значение = s * tr.
    """

    def __init__(
        self,
        bounds,
        bins: int = 16,
        feature_dim: int = 24,
        geometry_res: Sequence[float] = (0.24, 0.06),
        appearance_res: Sequence[float] = (0.24, 0.03),
        hidden: int = 16,
        omega: float = 0.5,
        mode: str = "full",
        init_std: float = 0.01,
        seed: int = 0,
    ):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"Неизвестный режим слияния '{mode}', доступны: {FUSION_MODES}")
        if not 0.0 <= omega <= 1.0:
            raise ValueError(f"omega должен лежать в [0, 1], получено {omega}")
        self.bounds = as_bounds(bounds)
        self.mode = mode
        self.omega = float(omega)

        self.oneblob = OneBlobEncoder(self.bounds, bins)
        self.planes = FeaturePlaneSet(
            self.bounds, feature_dim, geometry_res, appearance_res, init_std=init_std, seed=seed
        )
        d = self.planes.out_dim
        if self.oneblob.out_dim != d:
            raise ShapeMismatchError("fusion tokens", (self.oneblob.out_dim,), (d,))

        fused_in = 2 * d if mode == "concat" else d
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.color_fused = Decoder(fused_in, hidden, 3, "sigmoid")
            self.color_local = Decoder(d, hidden, 3, "sigmoid")
            # Смещение +0.5: новое поле почти везде предсказывает пустое пространство
            self.sdf_fused = Decoder(fused_in, hidden, 1, "tanh", final_bias=0.5)
            self.sdf_local = Decoder(d, hidden, 1, "tanh", final_bias=0.5)

    def _branch(
        self,
        points: torch.Tensor,
        kind: str,
        global_feat: torch.Tensor,
        fused_decoder: Decoder,
        local_decoder: Decoder,
    ) -> torch.Tensor:
        if self.mode == "global_only":
            return fused_decoder(global_feat)

        local = self.planes.query(points, kind)
        if self.mode == "local_only":
            return local_decoder(local)

        if self.mode == "concat":
            fused = concat([local, global_feat], dim=-1)
        elif self.mode == "no_attention":
            fused = 0.5 * add(local, global_feat)
        else:
            fused = attention_fuse(local, global_feat)

        omega = 1.0 if self.mode == "no_result_fusion" else self.omega
        return omega * fused_decoder(fused) + (1.0 - omega) * local_decoder(local)

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Оценка поля

        Args:
            points: (N, 3) точки в метрах (вне границ обрезаются)

        Returns:
            (цвет (N, 3) в (0, 1), TSDF (N,) в (-1, 1))
        """
        global_feat = self.oneblob.encode(points)
        color = self._branch(points, "appearance", global_feat, self.color_fused, self.color_local)
        sdf = self._branch(points, "geometry", global_feat, self.sdf_fused, self.sdf_local)
        return color, sdf[..., 0]

    def param_groups(self, lr_planes: float, lr_decoders: float) -> List[dict]:
        """Группы параметров для оптимизатора картирования"""
        decoders = [
            p for m in (self.color_fused, self.color_local, self.sdf_fused, self.sdf_local)
            for p in m.parameters()
        ]
        groups = [{"params": decoders, "lr": lr_decoders}]
        if self.mode != "global_only":
            groups.insert(0, {"params": list(self.planes.parameters()), "lr": lr_planes})
        return groups

    def sdf_function(self, tr: float, chunk: int = 65536) -> Callable[[np.ndarray], np.ndarray]:
        """
        Метрическая TSDF как функция numpy → numpy (для marching cubes)

        Args:
            tr: Расстояние усечения, м
            chunk: Размер пачки точек

        Returns:
            Функция points (N, 3) → TSDF (N,) в метрах
        """

        def query(points: np.ndarray) -> np.ndarray:
            out = np.empty(len(points), dtype=np.float64)
            with torch.no_grad():
                for i in range(0, len(points), chunk):
                    p = torch.as_tensor(points[i:i + chunk], dtype=DTYPE)
                    _, s = self(p)
                    out[i:i + chunk] = (s * tr).numpy()
            return out

        return query


def build_field(cfg: dict, bounds) -> FusionField:
    """
    Создание поля по секции model конфига

    Args:
        cfg: Полный конфиг запуска
        bounds: Границы сцены (2, 3)

    Returns:
        FusionField
    """
    m = cfg["model"]
    return FusionField(
        bounds,
        bins=m["oneblob_bins"],
        feature_dim=m["feature_dim"],
        geometry_res=m["geometry_res"],
        appearance_res=m["appearance_res"],
        hidden=m["hidden"],
        omega=m["omega"],
        mode=m["mode"],
        init_std=m["init_std"],
        seed=cfg["seed"],
    )
