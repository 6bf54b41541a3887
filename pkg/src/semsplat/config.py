"""Run configuration with flat dotted keys (``drop.p_base``, ``lr.position``, ...)."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .gates import HardConcreteParams
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    color: float = 2.5e-3
    opacity: float = 5e-2
    rotation: float = 1e-3
    scale: float = 5e-3
    feature: float = 2.5e-3
    gate: float = 1e-2


@dataclass
class DensityConfig:
    enabled: bool = True
    interval: int = 100
    start: int = 500
    stop: int = 5000
    grad_threshold: float = 0.03
    opacity_floor: float = 5e-3
    percent_dense: float = 0.01
    split_divisor: float = 1.6


@dataclass
class DropConfig:
    enabled: bool = True
    p_base: float = 1.0
    interval: int = 500
    mode: str = "stochastic"  # or "threshold"
    threshold: float = 0.5


@dataclass
class GateConfig:
    tau: float = 2.0 / 3.0
    low: float = -0.1
    high: float = 1.1
    init_logit: float = 2.0

    def params(self) -> HardConcreteParams:
        return HardConcreteParams(self.tau, self.low, self.high)


@dataclass
class PseudoConfig:
    enabled: bool = True
    kappa: float = 100.0
    # Entropy bound is mean + factor * std; -1 gives the stricter mean - std reading.
    entropy_std_factor: float = 1.0


@dataclass
class InitConfig:
    opacity: float = 0.1
    default_scale: float = 0.1
    feature_std: float = 0.01
    neighbors: int = 3


@dataclass
class SyntheticConfig:
    num_classes: int = 4
    gaussians_per_class: int = 100
    image_size: int = 128
    num_views: int = 12
    noise_sigma: float = 0.05
    clip_dim: int = 64
    grid: int = 4
    seed_fraction: float = 1.0
    seed_noise: float = 0.02


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 42
    semantic_dim: int = 32
    downscale: int = 2
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    min_weight: float = 1e-4
    checkpoint_interval: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    density: DensityConfig = field(default_factory=DensityConfig)
    drop: DropConfig = field(default_factory=DropConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    init: InitConfig = field(default_factory=InitConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.downscale < 1:
            raise ConfigError("downscale must be >= 1")
        if self.semantic_dim < 1:
            raise ConfigError("semantic_dim must be positive")
        if len(self.background) != 3:
            raise ConfigError("background must have three channels")
        if self.drop.interval < 1:
            raise ConfigError("drop.interval must be >= 1")
        if self.drop.p_base < 0:
            raise ConfigError("drop.p_base must be >= 0")
        if self.drop.mode not in ("stochastic", "threshold"):
            raise ConfigError(f"drop.mode must be 'stochastic' or 'threshold', got {self.drop.mode!r}")
        if self.density.interval < 1:
            raise ConfigError("density.interval must be >= 1")
        if self.synthetic.num_classes < 2 or self.synthetic.num_views < 3:
            raise ConfigError("synthetic scenes need >= 2 classes and >= 3 views")
        for group in dataclasses.fields(self.lr):
            if getattr(self.lr, group.name) < 0:
                raise ConfigError(f"lr.{group.name} must be >= 0")
        try:
            self.gate.params()
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def to_flat(cfg, prefix: str = "") -> dict:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = list(value) if isinstance(value, (list, tuple)) else value
    return flat


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if isinstance(default, bool) and value.lower() in ("true", "false"):
                value = value.lower() == "true"
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, str):
        return str(value)
    return value


def apply_overrides(cfg: TrainConfig, overrides: typing.Mapping[str, object]) -> TrainConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied; unknown keys are rejected."""
    return from_flat({**to_flat(cfg), **overrides})


def _checked(overrides, defaults: dict) -> dict:
    out = {}
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def from_flat(flat: typing.Mapping[str, object]) -> TrainConfig:
    defaults = to_flat(TrainConfig())
    values = {**defaults, **_checked(flat, defaults)}

    def build(cls, prefix):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            factory = f.default_factory
            if isinstance(factory, type) and dataclasses.is_dataclass(factory):
                kwargs[f.name] = build(factory, key + ".")
            else:
                kwargs[f.name] = values[key]
        return cls(**kwargs)

    return build(TrainConfig, "")


def load_config(path=None, overrides: typing.Mapping[str, object] | None = None) -> TrainConfig:
    flat: dict = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
    cfg = from_flat({**flat, **(overrides or {})})
    cfg.validate()
    return cfg
