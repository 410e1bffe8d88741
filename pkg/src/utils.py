import copy
import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml


class ConfigError(ValueError):
    """Ошибка схемы конфига (неизвестный ключ, неверное значение)"""


# Базовые значения: гиперпараметры модели и лоссов одинаковы для всех профилей
BASE_CONFIG = {
    "profile": "synthetic",
    "seed": 0,
    "output_dir": "output",
    "verbose": False,
    "dataset": {
        "kind": "synthetic",  # synthetic | tum
        "path": None,
        "max_frames": None,
        "stride": 1,
        "assoc_tolerance": 0.02,
        "bounds": None,  # None → по первому кадру (TUM) или комнате (synthetic)
        "init_pose": None,  # [tx, ty, tz, qx, qy, qz, qw]; None → эталон первого кадра или единичная
        "intrinsics": {
            "fx": 50.0, "fy": 50.0, "cx": 31.5, "cy": 23.5,
            "width": 64, "height": 48, "depth_scale": 5000.0,
        },
    },
    "scene": {
        "room_min": [-2.0, -1.5, 0.0],
        "room_max": [2.0, 1.5, 2.5],
        "bounds_margin": 0.1,
        "checker_period": 0.5,
        "objects": None,  # None → набор объектов по умолчанию
        "occluder": None,
        "light_dir": [0.3, -0.4, 0.85],
        "depth_noise": 0.0,
        "depth_dropout": 0.0,
        "fps": 30.0,
        "trajectory": {
            "kind": "arc",  # static | orbit | arc
            "n_frames": 20,
            "radius": 1.2,
            "height": 1.3,
            "target": [0.0, 0.0, 0.6],
            "start_deg": 0.0,
            "sweep_deg": 20.0,
        },
    },
    "model": {
        "oneblob_bins": 16,
        "feature_dim": 24,
        "geometry_res": [0.24, 0.06],
        "appearance_res": [0.24, 0.03],
        "hidden": 16,
        "omega": 0.5,
        "mode": "full",
        "init_std": 0.01,
    },
    "rendering": {
        "truncation": 0.06,
        "n_strat": 32,
        "n_imp": 8,
        "near": 0.05,
        "far": None,  # None → диагональ сцены
        "chunk": 4096,
    },
    "tracking": {
        "iterations": 8,
        "pixels": 2000,
        "lr_rot": 1e-3,
        "lr_trans": 1e-3,
        "const_speed": False,
        "keep_best": True,
        "weights": {"rgb": 5.0, "depth": 1.0, "sdf_near": 200.0, "sdf_far": 50.0, "fs": 5.0, "ic": 0.0},
    },
    "mapping": {
        "iterations": 15,
        "first_iterations": 200,
        "pixels": 4000,
        "lr_planes": 5e-3,
        "lr_decoders": 1e-3,
        "lr_rot": 5e-4,
        "lr_trans": 5e-4,
        "keyframe_every": 5,
        "window": 8,
        "weights": {"rgb": 5.0, "depth": 0.1, "sdf_near": 200.0, "sdf_far": 10.0, "fs": 5.0, "ic": 0.05},
    },
    "eval": {
        "mesh_resolution": 0.06,
        "gt_mesh_resolution": 0.02,
        "depth_l1_views": 50,
        "acc_comp_samples": 200000,
        "comp_ratio_threshold": 0.05,
        "align": True,
    },
}

# Отличия профилей от базы
PROFILE_OVERRIDES = {
    "synthetic": {
        "tracking": {"iterations": 20},
    },
    "replica": {
        "rendering": {"n_strat": 32, "n_imp": 8},
        "tracking": {"iterations": 8},
        "mapping": {"iterations": 15},
    },
    "tum": {
        "dataset": {
            "kind": "tum",
            "intrinsics": {
                "fx": 517.3, "fy": 516.5, "cx": 318.6, "cy": 255.3,
                "width": 640, "height": 480, "depth_scale": 5000.0,
            },
        },
        "rendering": {"n_strat": 48, "n_imp": 8},
        "tracking": {"iterations": 30},
        "mapping": {"iterations": 30},
    },
}


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """
    Рекурсивное слияние с отказом на неизвестных ключах

    Args:
        base: Словарь по умолчанию (изменяется на месте)
        override: Пользовательские значения
        path: Префикс ключа для сообщений

    Returns:
        base
    """
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"Неизвестный ключ конфига: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merge_config(base[key], value, dotted + ".")
        elif isinstance(base[key], dict):
            raise ConfigError(f"Ключ {dotted} должен быть секцией, получено {value!r}")
        else:
            base[key] = value
    return base


def default_config(profile: str = "synthetic") -> dict:
    """Конфиг по умолчанию для профиля (synthetic | replica | tum)"""
    if profile not in PROFILE_OVERRIDES:
        raise ConfigError(f"Неизвестный профиль '{profile}', доступны: {list(PROFILE_OVERRIDES)}")
    cfg = copy.deepcopy(BASE_CONFIG)
    merge_config(cfg, copy.deepcopy(PROFILE_OVERRIDES[profile]))
    cfg["profile"] = profile
    return cfg


def validate_config(cfg: dict) -> dict:
    """Проверка значений после слияния"""
    for section in ("tracking", "mapping"):
        for key in ("iterations", "pixels"):
            if int(cfg[section][key]) <= 0:
                raise ConfigError(f"{section}.{key} должен быть > 0")
        for name, w in cfg[section]["weights"].items():
            if w < 0:
                raise ConfigError(f"{section}.weights.{name} должен быть >= 0")
    if cfg["mapping"]["first_iterations"] <= 0:
        raise ConfigError("mapping.first_iterations должен быть > 0")
    if cfg["mapping"]["keyframe_every"] <= 0 or cfg["mapping"]["window"] <= 0:
        raise ConfigError("mapping.keyframe_every и mapping.window должны быть > 0")
    r = cfg["rendering"]
    if r["truncation"] <= 0 or r["n_strat"] <= 0 or r["n_imp"] < 0:
        raise ConfigError("rendering: truncation > 0, n_strat > 0, n_imp >= 0")
    if cfg["dataset"]["kind"] not in ("synthetic", "tum"):
        raise ConfigError(f"dataset.kind: synthetic | tum, получено {cfg['dataset']['kind']}")
    return cfg


def load_config(config_path: Optional[str] = "config.yaml", overrides: Optional[dict] = None) -> dict:
    """
    Загрузка конфигурации запуска

    Args:
        config_path: Путь к YAML (None → только значения по умолчанию)
        overrides: Дополнительные значения поверх файла (seed, output_dir)

    Returns:
        Полный словарь конфигурации
    """
    user = {}
    if config_path is not None:
        config_file = Path(config_path)

        if not config_file.exists():
            print(f"⚠️ Конфиг не найден: {config_path}")
            raise FileNotFoundError(f"Конфиг не найден: {config_path}")

        with open(config_file, "r", encoding="utf-8") as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"Конфиг должен быть словарём: {config_path}")

    profile = user.get("profile", "synthetic")
    cfg = default_config(profile)
    merge_config(cfg, user)
    if overrides:
        merge_config(cfg, overrides)
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    """Короткий хеш конфига для сводки запуска"""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def seed_everything(seed: int) -> np.random.Generator:
    """
    Фиксация всех источников случайности

    Args:
        seed: Зерно запуска

    Returns:
        Генератор numpy, через который идут все случайные выборы
    """
    torch.manual_seed(seed)
    return np.random.default_rng(seed)
