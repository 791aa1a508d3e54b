"""Run directory layout: config copy, metrics file, checkpoints and media."""
from __future__ import annotations

import json
import logging
import os
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ValidationError
from tabulate import tabulate

from config import TrainConfig, dump_config

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "deskworld-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, incompatible or incomplete checkpoint."""


class CheckpointHeader(BaseModel):
    kind: Literal["deskworld-checkpoint"] = CHECKPOINT_KIND
    version: int = CHECKPOINT_VERSION
    created: str
    task: str
    action_dim: int
    discrete: bool
    env_steps: int
    grad_steps: int
    config: str


def read_metrics(path: str | os.PathLike) -> list[dict[str, Any]]:
    """All records of a metrics file, in file order."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def to_image(frame: np.ndarray) -> Image.Image:
    """(3, H, W) uint8 or [-0.5, 0.5] float array to an RGB image."""
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        frame = np.clip(np.round((frame + 0.5) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(np.ascontiguousarray(frame.transpose(1, 2, 0)))


class RunStorage:
    """Owns one run directory.

    ``config.cfg`` holds the resolved config, ``metrics.jsonl`` one JSON
    record per line, ``checkpoints/`` the ``.pt`` files and ``media/`` PNGs
    and latent dumps.
    """

    def __init__(self, run_dir: str | os.PathLike):
        self.run_dir = Path(run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.media_dir = self.run_dir / "media"
        self.metrics_path = self.run_dir / "metrics.jsonl"
        self.config_path = self.run_dir / "config.cfg"
        for folder in (self.run_dir, self.checkpoint_dir, self.media_dir):
            folder.mkdir(parents=True, exist_ok=True)

    def reset(self) -> None:
        """Delete metrics, checkpoints and media of this run."""
        for folder in (self.checkpoint_dir, self.media_dir):
            if folder.exists():
                shutil.rmtree(folder)
            folder.mkdir()
        self.metrics_path.unlink(missing_ok=True)
        logger.info("Reset run directory %s", self.run_dir)

    def write_config(self, config: TrainConfig) -> Path:
        self.config_path.write_text(dump_config(config), encoding="utf-8")
        return self.config_path

    def write_metrics(self, record: BaseModel | dict[str, Any]) -> None:
        if isinstance(record, BaseModel):
            record = record.model_dump(exclude_none=True)
        with open(self.metrics_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record) + "\n")
            handle.flush()

    def read_metrics(self) -> list[dict[str, Any]]:
        if not self.metrics_path.exists():
            return []
        return read_metrics(self.metrics_path)

    def save_checkpoint(self, name: str, header: CheckpointHeader, state: dict[str, Any]) -> Path:
        """Write ``checkpoints/<name>.pt`` atomically."""
        path = self.checkpoint_dir / f"{name}.pt"
        tmp = path.with_suffix(".pt.tmp")
        torch.save({"header": header.model_dump(), "state": state}, tmp)
        os.replace(tmp, path)
        logger.debug("Saved checkpoint %s", path)
        return path

    def latest_checkpoint(self) -> Path | None:
        latest = self.checkpoint_dir / "latest.pt"
        return latest if latest.exists() else None

    def save_image(self, image: Image.Image | np.ndarray, name: str) -> Path:
        if not isinstance(image, Image.Image):
            image = to_image(image)
        path = self.media_dir / f"{name}.png"
        image.save(path, "PNG")
        return path

    def save_arrays(self, name: str, **arrays: np.ndarray) -> Path:
        path = self.media_dir / f"{name}.npz"
        np.savez_compressed(path, **arrays)
        return path

    def print_metrics(self, last: int = 10, keys: tuple[str, ...] = ("kind", "env_steps", "grad_steps", "total", "actor_loss", "eval_return")) -> str:
        """Table of the newest records, newest first."""
        records = self.read_metrics()[-last:][::-1]
        if not records:
            return "No metrics recorded."
        rows = [[record.get(key, "") for key in keys] for record in records]
        return tabulate(rows, headers=list(keys), floatfmt=".4g")


def load_checkpoint(path: str | os.PathLike, map_location: str | torch.device = "cpu") -> tuple[CheckpointHeader, dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "header" not in payload or "state" not in payload:
        raise CheckpointError(f"{path} is not a run checkpoint")
    try:
        header = CheckpointHeader(**payload["header"])
    except ValidationError as exc:
        raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.version}, expected {CHECKPOINT_VERSION}")
    return header, payload["state"]


def timestamp() -> str:
    return datetime.now().strftime("%Y%m%d_%H%M%S")
