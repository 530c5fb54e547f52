"""
Run configuration for the command-line tools.

Values come from three places, highest precedence first: command-line flags,
a flat ``key = value`` TOML file passed with ``--config``, and the defaults
declared on :class:`RunConfig`. Unknown keys and nested tables are errors.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .augment import GEOMETRY_PRESETS, Geometry
from .errors import ConfigError
from .losses import LossConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class RunConfig(BaseModel):
    """Every tunable of a training run, flat."""

    model_config = ConfigDict(extra="forbid")

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    seed: int = Field(0, ge=0)

    # loss
    loss: Literal["dice", "ml_dice"] = "ml_dice"
    logcosh: bool = True
    numerator_factor: Literal[1, 2] = 2
    epsilon: float = Field(1e-6, gt=0)

    # augmentation
    tfi: bool = True
    aug: bool = True
    tfi_alpha: float = Field(1.0, gt=0)
    tfi_beta: float = Field(1.0, gt=0)

    # network
    arch: Literal["unet2d", "unet3d"] = "unet2d"
    depth: int = Field(3, ge=1)
    base_width: int = Field(16, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)
    geometry: str = "desk"

    # optimisation
    epochs: int = Field(90, ge=1)
    # Desk-scale runs see a few hundred steps; TrainConfig keeps 1e-4 for long runs.
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.02, ge=0)
    batch_size: int = Field(8, ge=1)
    lr_decay_factor: float = Field(0.9, gt=0, lt=1)
    early_stop_patience: int = Field(10, ge=1)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            epsilon=self.epsilon,
            numerator_factor=self.numerator_factor,
            use_logcosh=self.logcosh,
            loss_kind=self.loss,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.epochs,
            lr_decay_factor=self.lr_decay_factor,
            early_stop_patience=self.early_stop_patience,
            seed=self.seed,
            loss=self.loss_config(),
            tfi_enabled=self.tfi,
            geometric_enabled=self.aug,
            tfi_alpha=self.tfi_alpha,
            tfi_beta=self.tfi_beta,
        )

    def unet_overrides(self) -> Dict[str, Any]:
        return {"depth": self.depth, "base_width": self.base_width, "dropout": self.dropout, "arch": self.arch}

    def geometry_model(self) -> Geometry:
        if self.geometry not in GEOMETRY_PRESETS:
            raise ConfigError(f"unknown geometry {self.geometry!r}; choose from {sorted(GEOMETRY_PRESETS)}")
        return GEOMETRY_PRESETS[self.geometry]


def default_for(key: str) -> Any:
    return RunConfig.model_fields[key].default


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse a flat configuration file.

    Args:
        path: TOML file of ``key = value`` lines

    Returns:
        Dict[str, Any]: the values it sets
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            values = toml.load(file)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None

    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: nested table [{key}] is not allowed; use flat key = value lines")
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return values


def resolve_config(
    flags: Optional[Mapping[str, Any]] = None,
    config_file: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Merge flags over file values over defaults. Flags set to None are treated as absent."""
    values: Dict[str, Any] = {}
    if config_file is not None:
        values.update(load_config_file(config_file))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in RunConfig.model_fields:
            raise ConfigError(f"unknown option {key!r}")
        values[key] = value
    try:
        run = RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from None
    run.geometry_model()
    return run


def configure_logging(level: str = "INFO") -> None:
    """Route toolkit logs to stderr as ``LEVEL: message`` lines."""
    if level not in LOG_LEVELS:
        raise ConfigError(f"unknown log level {level!r}; choose from {LOG_LEVELS}")
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s: %(message)s", force=True)
