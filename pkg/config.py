"""Training configuration: schema, flat ``key = value`` files and presets."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Iterable, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"
RUN_ROOT_ENV = "DESKWORLD_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


class ConfigError(ValueError):
    """Unknown key, unparsable value or out-of-range setting."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    # general
    task: Literal["pixelpoint_dense", "pixelpoint_sparse", "pixelcatch"] = "pixelpoint_dense"
    seed: int = Field(0, ge=0)
    steps: int = Field(200_000, gt=0)
    replay_capacity: int = Field(1_000_000, gt=0)
    batch_size: int = Field(16, gt=0)
    batch_length: int = Field(64, gt=1)
    train_ratio: float = Field(512, gt=0)
    env_instances: int = Field(4, gt=0)
    min_steps: int = Field(1024, ge=0)
    image_size: int = Field(64, ge=16, le=128)
    action_repeat: int = Field(0, ge=0)
    device: str = "cpu"
    threaded_collection: bool = False

    # network sizes
    cnn_depth: int = Field(32, gt=0)
    hidden_size: int = Field(512, gt=0)
    recurrent_size: int = Field(512, gt=0)
    mlp_layers: int = Field(3, ge=1)
    num_latents: int = Field(32, gt=0)
    classes_per_latent: int = Field(32, gt=1)
    unimix: float = Field(0.01, ge=0.0, le=1.0)
    twohot_bins: int = Field(255, ge=2)
    twohot_low: float = -20.0
    twohot_high: float = 20.0

    # world model
    beta_pred: float = Field(1.0, ge=0.0)
    beta_dyn: float = Field(0.95, ge=0.0)
    beta_rep: float = Field(0.05, ge=0.0)
    free_nats: float = Field(1.0, ge=0.0)
    reward_loss_scale: float = Field(1.0, gt=0.0)
    model_lr: float = Field(1e-4, gt=0.0)
    model_eps: float = Field(1e-8, gt=0.0)
    model_clip: float = Field(1000.0, gt=0.0)
    adam_beta1: float = Field(0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, gt=0.0, lt=1.0)
    slow_value_decay: float = Field(0.99, ge=0.0, le=1.0)
    discount: float = Field(0.997, gt=0.0, le=1.0)
    return_lambda: float = Field(0.95, ge=0.0, le=1.0)
    batchnorm: bool = True
    batchnorm_momentum: float = Field(0.9, gt=0.0, lt=1.0)
    value_head: bool = True
    action_head: bool = True
    decoder: bool = True

    # actor critic
    horizon: int = Field(15, ge=1)
    critic_ema_decay: float = Field(0.98, ge=0.0, le=1.0)
    critic_ema_reg: float = Field(1.0, ge=0.0)
    return_norm_decay: float = Field(0.99, ge=0.0, le=1.0)
    return_norm_low: float = Field(5.0, ge=0.0, le=100.0)
    return_norm_high: float = Field(95.0, ge=0.0, le=100.0)
    actor_entropy: float = Field(3e-4, ge=0.0)
    actor_lr: float = Field(3e-5, gt=0.0)
    critic_lr: float = Field(3e-5, gt=0.0)
    ac_eps: float = Field(1e-5, gt=0.0)
    ac_clip: float = Field(100.0, gt=0.0)
    detach_baseline_dynamics: bool = False

    # environments
    distractors: bool = False
    distractor_seed: int = Field(0, ge=0)

    # bookkeeping
    eval_every: int = Field(10_000, gt=0)
    eval_episodes: int = Field(10, gt=0)
    checkpoint_every: int = Field(10_000, gt=0)
    log_every: int = Field(100, gt=0)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "TrainConfig":
        if self.image_size & (self.image_size - 1):
            raise ValueError(f"image_size must be a power of two, got {self.image_size}")
        if self.batchnorm and self.batch_size < 2:
            raise ValueError("batch normalization needs batch_size >= 2")
        if not self.twohot_low < self.twohot_high:
            raise ValueError("twohot_low must be below twohot_high")
        if not self.return_norm_low < self.return_norm_high:
            raise ValueError("return_norm_low must be below return_norm_high")
        return self

    @property
    def discrete(self) -> bool:
        return self.task == "pixelcatch"


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def parse_pairs(lines: Iterable[str], source: str = "<overrides>") -> dict[str, Any]:
    """Parse ``key = value`` (or ``key=value``) lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        values[key] = _parse_value(value)
    return values


def build_config(values: dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_preset(name_or_path: str | os.PathLike) -> Path:
    path = Path(name_or_path)
    if path.is_file():
        return path
    for candidate in (path.with_suffix(".cfg"), PRESET_DIR / path.name, PRESET_DIR / f"{path.name}.cfg"):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"no config file or preset named {str(name_or_path)!r}")


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    values: dict[str, Any] = {}
    if path is not None:
        resolved = resolve_preset(path)
        values.update(parse_pairs(resolved.read_text().splitlines(), str(resolved)))
    values.update(parse_pairs(overrides))
    return build_config(values)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.model_dump().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


class ConfigManager:
    """Loads a config file, writing the defaults first when it does not exist."""

    def __init__(self, file_path: str | os.PathLike, default_config: TrainConfig | None = None):
        self.file_path = Path(file_path)
        self.default_config = default_config or TrainConfig()
        self.config = self.load_or_create()

    def load_or_create(self) -> TrainConfig:
        if not self.file_path.exists():
            self.file_path.parent.mkdir(parents=True, exist_ok=True)
            self.file_path.write_text(dump_config(self.default_config))
            logger.info("Wrote default config to %s", self.file_path)
            return self.default_config
        return load_config(self.file_path)

    def get_config(self) -> TrainConfig:
        return self.config

    def with_overrides(self, overrides: Iterable[str]) -> TrainConfig:
        values = self.config.model_dump()
        values.update(parse_pairs(overrides))
        return build_config(values)
