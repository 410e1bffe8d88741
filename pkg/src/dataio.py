# src/dataio.py
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import trimesh
import yaml
from PIL import Image
from tqdm import tqdm

from camera_pose import PoseSE3
from renderer import CameraIntrinsics

RGB_LIST = "rgb.txt"
DEPTH_LIST = "depth.txt"
GT_LIST = "groundtruth.txt"
INTRINSICS_FILE = "intrinsics.yaml"


class DatasetError(IOError):
    """Отсутствующие файлы или пустые ассоциации датасета"""


@dataclass
class FrameRGBD:
    """Кадр RGB-D: цвет в [0, 1], z-глубина в метрах, маска валидной глубины"""

    color: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    timestamp: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.color.shape != (h, w, 3) or self.depth.shape != (h, w) or self.valid.shape != (h, w):
            raise ValueError(
                f"Размеры кадра {self.color.shape}/{self.depth.shape} не совпадают с камерой {w}x{h}"
            )
        self.valid = self.valid.astype(bool) & np.isfinite(self.depth) & (self.depth > 0)
        self.depth = np.where(self.valid, self.depth, 0.0)

    @classmethod
    def from_arrays(cls, color: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics,
                    timestamp: float = 0.0) -> "FrameRGBD":
        """Валидность глубины выводится из значений: 0 и не-конечные считаются дырами"""
        depth = np.asarray(depth, dtype=np.float64)
        return cls(np.asarray(color, dtype=np.float64), depth, np.isfinite(depth) & (depth > 0),
                   float(timestamp), intr)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass
class TumSequence:
    frames: List[FrameRGBD]
    gt_poses: Optional[List[PoseSE3]]
    intrinsics: CameraIntrinsics

    @property
    def timestamps(self) -> List[float]:
        return [f.timestamp for f in self.frames]


def read_color_png(path) -> np.ndarray:
    """8-битный PNG → float RGB в [0, 1]"""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_color_png(path, color: np.ndarray):
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_depth_png(path, scale: float) -> np.ndarray:
    """16-битный PNG → метры (0 остаётся дырой)"""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"Не удалось прочитать глубину: {path}")
    return raw.astype(np.float64) / scale


def write_depth_png(path, depth: np.ndarray, scale: float):
    """Метры → 16-битный PNG; дыры и не-конечные значения пишутся как 0"""
    depth = np.where(np.isfinite(depth), depth, 0.0)
    raw = np.clip(np.round(depth * scale), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), raw):
        raise IOError(f"Не удалось записать глубину: {path}")


def read_tum_list(path) -> List[Tuple[float, List[str]]]:
    """Строки 'timestamp data...' без комментариев"""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Файл датасета не найден: {path}")
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            entries.append((float(parts[0]), parts[1:]))
    return entries


def associate(stamps_a: Sequence[float], stamps_b: Sequence[float], tolerance: float) -> List[Tuple[int, int]]:
    """
    Сопоставление меток времени по ближайшему соседу (каждая метка используется один раз)

    Args:
        stamps_a: Метки первого потока
        stamps_b: Метки второго потока
        tolerance: Максимальная разница, секунды

    Returns:
        Пары индексов (i, j), упорядоченные по i
    """
    a = np.asarray(stamps_a, dtype=np.float64)
    b = np.asarray(stamps_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ii, jj = np.nonzero(diff < tolerance)
    order = np.argsort(diff[ii, jj], kind="stable")
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def read_intrinsics(path, default: CameraIntrinsics) -> CameraIntrinsics:
    """intrinsics.yaml рядом с датасетом, иначе значения из конфига"""
    path = Path(path)
    if not path.exists():
        return default
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return CameraIntrinsics.from_dict({**default.to_dict(), **data})


def write_intrinsics(path, intr: CameraIntrinsics):
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(intr.to_dict(), f, allow_unicode=True, default_flow_style=False)


def load_tum_sequence(
    dataset_dir,
    intr: CameraIntrinsics,
    tolerance: float = 0.02,
    max_frames: Optional[int] = None,
    stride: int = 1,
) -> TumSequence:
    """
    Загрузка последовательности в раскладке TUM RGB-D

    Args:
        dataset_dir: Папка с rgb.txt, depth.txt и (опционально) groundtruth.txt
        intr: Интринсики по умолчанию (перекрываются intrinsics.yaml)
        tolerance: Допуск ассоциации меток, секунды
        max_frames: Ограничение числа кадров
        stride: Шаг прореживания

    Returns:
        TumSequence
    """
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DatasetError(f"Папка датасета не найдена: {root}")
    print(f"📂 Загружаем TUM-последовательность: {root}")

    intr = read_intrinsics(root / INTRINSICS_FILE, intr)
    rgb = read_tum_list(root / RGB_LIST)
    depth = read_tum_list(root / DEPTH_LIST)
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], tolerance)
    if not pairs:
        raise DatasetError(f"Нет ассоциаций rgb/depth в пределах {tolerance * 1000:.0f} мс: {root}")
    pairs = pairs[::max(1, int(stride))]
    if max_frames:
        pairs = pairs[:max_frames]

    gt_poses = None
    if (root / GT_LIST).exists():
        gt = read_tum_list(root / GT_LIST)
        gt_pairs = dict(associate([rgb[i][0] for i, _ in pairs], [t for t, _ in gt], tolerance))
        if len(gt_pairs) == len(pairs):
            gt_poses = [PoseSE3.from_tum([float(v) for v in gt[gt_pairs[k]][1][:7]]) for k in range(len(pairs))]
        else:
            print(f"⚠️ Ground truth покрывает {len(gt_pairs)} из {len(pairs)} кадров, траектория не загружена")

    frames = []
    for i, j in tqdm(pairs, desc="Кадры"):
        color = read_color_png(root / rgb[i][1][0])
        d = read_depth_png(root / depth[j][1][0], intr.depth_scale)
        frames.append(FrameRGBD.from_arrays(color, d, intr, rgb[i][0]))

    valid = np.mean([f.valid_fraction for f in frames])
    print(f"✅ Загружено кадров: {len(frames)}, валидной глубины {valid:.0%}")
    return TumSequence(frames=frames, gt_poses=gt_poses, intrinsics=intr)


def write_tum_trajectory(path, timestamps: Sequence[float], poses: Sequence[PoseSE3]):
    """Траектория в формате TUM: 'timestamp tx ty tz qx qy qz qw'"""
    if len(timestamps) != len(poses):
        raise ValueError(f"Меток {len(timestamps)}, поз {len(poses)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(timestamps, poses):
            values = " ".join(f"{v:.9f}" for v in pose.to_tum())
            f.write(f"{t:.6f} {values}\n")


def read_tum_trajectory(path) -> Tuple[List[float], List[PoseSE3]]:
    entries = read_tum_list(path)
    stamps = [t for t, _ in entries]
    poses = [PoseSE3.from_tum([float(v) for v in values[:7]]) for _, values in entries]
    return stamps, poses


def save_mesh_ply(mesh: trimesh.Trimesh, path):
    """PLY, бинарный little-endian"""
    Path(path).write_bytes(trimesh.exchange.ply.export_ply(mesh, encoding="binary"))


def load_mesh_ply(path) -> trimesh.Trimesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Меш не найден: {path}")
    mesh = trimesh.load(str(path), file_type="ply", process=False, force="mesh")
    return mesh
