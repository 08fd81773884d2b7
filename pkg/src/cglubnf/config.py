"""Run configuration: one JSON document, validated before any work starts."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .encoder import EncoderConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DataConfig:
    covariates: Tuple[str, ...] = ()
    frequency: str = "hourly"
    sigma_d: Optional[float] = None
    haversine: bool = False
    strict: bool = False


@dataclass(frozen=True)
class ModelConfig:
    cglu_layers: int = 2
    hidden_dim: int = 64


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-3
    lr_min: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    epochs: int = 2000
    batch_size: int = 512
    divergence_grad_norm: float = 1e6
    divergence_patience: int = 10

    @property
    def min_lr(self) -> float:
        return self.lr / 100.0 if self.lr_min is None else self.lr_min


@dataclass(frozen=True)
class RunConfig:
    seed: int
    particles: int = 4
    interval_level: float = 0.95
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("particles: must be >= 1")
        if not 0.0 < self.interval_level < 1.0:
            raise ConfigError("interval_level: must lie in (0, 1)")
        if self.model.cglu_layers < 0 or self.model.hidden_dim < 1:
            raise ConfigError("model: cglu_layers >= 0 and hidden_dim >= 1 required")
        if self.optim.epochs < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim: epochs >= 0 and batch_size >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, f"{path}.")
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (inner, *_rest) = typing.get_args(tp)
        return tuple(_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, d: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")
    kwargs = {}
    for name, f in names.items():
        path = f"{prefix}{name}"
        if name not in d:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"missing required key {path}")
            continue
        kwargs[name] = _coerce(hints[name], d[name], path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc
