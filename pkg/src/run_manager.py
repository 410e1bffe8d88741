import csv
import json
import time
from pathlib import Path
from typing import Optional

from losses import TERM_NAMES, LossReport
from utils import config_hash

LOG_COLUMNS = ["frame", "phase", "iteration", *TERM_NAMES, "total", "rays", "rays_valid"]


class TrainingLog:
    """CSV-лог итераций трекинга и картирования; экземпляр используется как hook движка"""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=LOG_COLUMNS)
        self._writer.writeheader()
        self.rows = 0

    def __call__(self, frame: int, phase: str, iteration: int, report: LossReport):
        row = {"frame": frame, "phase": phase, "iteration": iteration, **report.as_row()}
        self._writer.writerow({k: row[k] for k in LOG_COLUMNS})
        self.rows += 1

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RunManager:
    """Раскладка выходной папки запуска; всё пишется только внутрь неё"""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.started = time.time()
        self.timings = {}

    def create_layout(self) -> Path:
        """
        Создание структуры папок запуска

        Returns:
            Корень запуска
        """
        for sub in ("logs", "mesh", "renders", "checkpoints"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self.root

    @property
    def train_log(self) -> Path:
        return self.root / "logs" / "train_log.csv"

    @property
    def summary(self) -> Path:
        return self.root / "logs" / "summary.json"

    @property
    def trajectory(self) -> Path:
        return self.root / "trajectory.txt"

    @property
    def gt_trajectory(self) -> Path:
        return self.root / "trajectory_gt.txt"

    @property
    def mesh(self) -> Path:
        return self.root / "mesh" / "mesh.ply"

    @property
    def culled_mesh(self) -> Path:
        return self.root / "mesh" / "mesh_culled.ply"

    @property
    def gt_mesh(self) -> Path:
        return self.root / "mesh" / "gt_mesh.ply"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoints" / "engine.pt"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.json"

    @property
    def renders(self) -> Path:
        return self.root / "renders"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    def open_log(self) -> TrainingLog:
        return TrainingLog(self.train_log)

    def mark(self, stage: str):
        """Время от старта запуска до конца этапа"""
        self.timings[stage] = round(time.time() - self.started, 3)

    def write_summary(self, cfg: dict, extra: Optional[dict] = None) -> Path:
        """
        Итоговый JSON запуска

        Args:
            cfg: Полный конфиг
            extra: Метрики и прочие значения

        Returns:
            Путь к summary.json
        """
        summary = {
            "config_hash": config_hash(cfg),
            "profile": cfg["profile"],
            "seed": cfg["seed"],
            "mode": cfg["model"]["mode"],
            "timings_sec": self.timings,
            **(extra or {}),
        }
        self.summary.parent.mkdir(parents=True, exist_ok=True)
        with open(self.summary, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=4, ensure_ascii=False, default=str)
        return self.summary

    def show_status(self):
        """Вывод содержимого запуска"""
        print(f"\n📊 Запуск: {self.root}")
        for name, path in (
            ("Траектория", self.trajectory),
            ("Меш", self.culled_mesh),
            ("Метрики", self.metrics),
            ("Чекпоинт", self.checkpoint),
            ("Лог", self.train_log),
        ):
            print(f"   {'✅' if path.exists() else '❌'} {name}: {path.name}")
