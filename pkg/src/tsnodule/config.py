"""Run configuration: nested JSON sections parsed strictly into dataclasses.

A missing key takes its default. An unknown key, a wrong type (``true`` is
not an integer) or an invalid value raises :class:`ConfigError` naming the
dotted key.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig, TapPoint
from .errors import ConfigError
from .synth import Gaussian, SynthConfig
from .train import TrainConfig

MODES = {"t1": "single_stream", "t2": "single_stream", "t1t2": "two_stream"}


@dataclass(frozen=True)
class ModelSection:
    preset: str = "tiny"
    tap: str = "AvgPool"
    mode: str = "t1t2"
    backbone_seed: int = 0
    hidden_units: int = 64
    backbone_ckpt: str | None = None

    def __post_init__(self):
        BackboneConfig.preset(self.preset)
        object.__setattr__(self, "tap", str(TapPoint.parse(self.tap)))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig.preset(self.preset)


@dataclass(frozen=True)
class DataSection:
    cohort_path: str | None = None
    split_seed: int = 0
    split_fraction: float = 0.7
    kfolds: int = 10

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.kfolds < 2:
            raise ValueError("kfolds must be at least 2")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)


def _convert(value, hint, key):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        opts = typing.get_args(hint)
        if value is None and type(None) in opts:
            return None
        return _convert(value, next(o for o in opts if o is not type(None)), key)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{key}: expected {len(args)} entries, got {len(value)}")
            return tuple(_convert(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        return tuple(_convert(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, key)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        raise ConfigError(f"{key}: unsupported field type {hint}")
    if not ok:
        raise ConfigError(f"{key}: expected {hint.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key {prefix + '.' if prefix else ''}{k}")
    kwargs = {k: _convert(v, hints[k], f"{prefix + '.' if prefix else ''}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def parse_config(path) -> RunConfig:
    """Read a JSON run config; an empty file gives the all-default config."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if not text.strip():
        return RunConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON: {exc}") from exc
    return config_from_dict(data)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


__all__ = ["RunConfig", "ModelSection", "DataSection", "Gaussian", "parse_config", "config_from_dict",
           "config_to_dict", "dump_config", "MODES"]
