# src/checkpoint.py
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from renderer import CameraIntrinsics
from slam_engine import SlamEngine
from tensor_core import params_checksum
from utils import config_hash

CHECKPOINT_FORMAT = "fusion-slam-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Отсутствующий, повреждённый или несовместимый чекпоинт"""


def save_checkpoint(engine: SlamEngine, intr: CameraIntrinsics, path) -> Path:
    """
    Атомарная запись состояния движка (через временный файл)

    Args:
        engine: Движок SLAM
        intr: Интринсики кадров
        path: Путь к .pt

    Returns:
        Путь к чекпоинту
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": engine.cfg,
        "config_hash": config_hash(engine.cfg),
        "intrinsics": intr.to_dict(),
        "bounds": np.asarray(engine.field.bounds),
        "state": engine.state_dict(),
        "field_checksum": params_checksum(engine.field.parameters()),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    print(f"💾 Чекпоинт сохранён: {path}")
    return path


def load_checkpoint(path) -> dict:
    """
    Чтение и проверка чекпоинта

    Args:
        path: Путь к .pt

    Returns:
        Словарь с ключами config, intrinsics, bounds, state, field_checksum
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Чекпоинт не найден: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Повреждённый чекпоинт {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Файл не является чекпоинтом: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Версия чекпоинта {payload.get('version')} не поддерживается (ожидается {CHECKPOINT_VERSION})"
        )
    for key in ("config", "intrinsics", "bounds", "state", "field_checksum"):
        if key not in payload:
            raise CheckpointError(f"В чекпоинте нет раздела '{key}': {path}")
    return payload


def restore_engine(payload: dict, rng: Optional[np.random.Generator] = None) -> SlamEngine:
    """Движок из загруженного чекпоинта (генератор продолжает сохранённую последовательность)"""
    rng = rng if rng is not None else np.random.default_rng(payload["config"]["seed"])
    engine = SlamEngine(payload["config"], payload["bounds"], rng)
    engine.load_state_dict(payload["state"], CameraIntrinsics.from_dict(payload["intrinsics"]))
    if params_checksum(engine.field.parameters()) != payload["field_checksum"]:
        raise CheckpointError("Параметры поля не совпадают с контрольной суммой чекпоинта")
    return engine
