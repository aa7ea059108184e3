"""Experiment configuration: dataclasses plus the flat key=value bridge.

Config files are flat ``key=value`` text; every key can also be overridden on
the command line as ``--key value``. Keys follow ``section.field`` naming,
e.g. ``loss.lambda_base``, ``train.epochs``, ``ablate.xnet``, ``dcr.hidden``,
``net.tower_hidden``, ``metrics.k``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dcr import DcrConfig
from .errors import ConfigError

SEED_ENV_VAR = "UNIMVT_SEED"


@dataclass
class NetConfig:
    tower_hidden: tuple[int, ...] = (32, 32)
    head_hidden: int = 16


@dataclass
class LossWeights:
    lambda_base: float = 1.0
    lambda_treat: float = 1.0
    lambda_t: float = 0.1
    lambda_x: float = 0.5
    lambda_o: float = 1e-4
    l1: float = 1.0    # absolute-error weight inside the intensity loss
    l2: float = 1.0    # squared-error weight inside the intensity loss

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class TrainConfig:
    epochs: int = 6
    batch: int = 256
    lr: float = 1e-3
    seed: int | None = None  # falls back to $UNIMVT_SEED, then 0


@dataclass
class AblationConfig:
    dcr: bool = False
    xnet: bool = False
    treat_tower: bool = False


@dataclass
class ExperimentConfig:
    dcr: DcrConfig = field(default_factory=DcrConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)
    metrics_k: int = 100

    def dcr_enabled(self) -> bool:
        return self.dcr.enabled and not self.ablate.dcr


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def resolve_seed(cfg: ExperimentConfig) -> int:
    if cfg.train.seed is not None:
        return cfg.train.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return 0


_SECTIONS = ("dcr", "net", "loss", "train", "ablate")


def _parse_value(current, raw: str, key: str):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(current, int) or current is None:  # None only for train.seed
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    """Apply flat key=value overrides in place; unknown keys raise ConfigError."""
    for key, raw in flat.items():
        if key == "metrics.k":
            cfg.metrics_k = int(raw)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        if not hasattr(obj, name):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse_value(getattr(obj, name), str(raw), key))
    return cfg


def config_to_flat(cfg: ExperimentConfig) -> dict:
    """Flatten a config to key=value strings (deterministic content for manifests)."""
    flat = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            flat[f"{section}.{f.name}"] = str(value)
    flat["metrics.k"] = str(cfg.metrics_k)
    return flat


def load_config_file(path) -> dict:
    """Read a flat key=value file, ignoring blank lines and # comments."""
    flat = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = default_config()
    if path is not None:
        apply_overrides(cfg, load_config_file(path))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.loss.validate()
    return cfg
