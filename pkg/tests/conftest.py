import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import tensor_core  # noqa: E402,F401  (float64 по умолчанию)
from renderer import CameraIntrinsics  # noqa: E402
from utils import default_config  # noqa: E402

UNIT_BOUNDS = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="запускать долгие сквозные тесты")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: сквозные прогоны SLAM (нужен --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def directional_fd_check(fn, params, rng, eps=1e-6, rtol=1e-3, atol=1e-9):
    """
    Сравнение производной по случайному направлению: autograd против центральной разности

    Args:
        fn: Детерминированная функция без аргументов → скаляр
        params: Тензоры с requires_grad
        rng: Генератор направления
        eps: Шаг разности
        rtol, atol: Допуски
    """
    directions = [torch.as_tensor(rng.standard_normal(tuple(p.shape))) for p in params]
    value = fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, directions) if g is not None)

    with torch.no_grad():
        for p, d in zip(params, directions):
            p.add_(eps * d)
        plus = float(fn())
        for p, d in zip(params, directions):
            p.sub_(2 * eps * d)
        minus = float(fn())
        for p, d in zip(params, directions):
            p.add_(eps * d)
    numeric = (plus - minus) / (2 * eps)
    scale = max(abs(analytic), abs(numeric))
    assert abs(analytic - numeric) <= rtol * scale + atol, (analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def unit_bounds():
    return UNIT_BOUNDS.copy()


@pytest.fixture
def small_intr():
    # нечётные размеры: главная точка попадает ровно в центр пикселя
    return CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=6.0, width=17, height=13)


@pytest.fixture
def small_cfg():
    cfg = default_config("synthetic")
    cfg["dataset"]["intrinsics"] = {
        "fx": 20.0, "fy": 20.0, "cx": 8.0, "cy": 6.0, "width": 17, "height": 13, "depth_scale": 5000.0,
    }
    cfg["rendering"].update({"n_strat": 8, "n_imp": 4})
    cfg["tracking"].update({"iterations": 3, "pixels": 64})
    cfg["mapping"].update({"iterations": 3, "first_iterations": 5, "pixels": 128, "keyframe_every": 2, "window": 3})
    cfg["scene"]["trajectory"].update({"n_frames": 5})
    cfg["eval"].update({"depth_l1_views": 3, "acc_comp_samples": 2000, "mesh_resolution": 0.2,
                        "gt_mesh_resolution": 0.1})
    return cfg
