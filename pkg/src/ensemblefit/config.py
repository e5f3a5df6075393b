"""Run configuration: nested dataclasses with strict JSON parsing and documented defaults.

Absent keys take the defaults below. Fields left as ``None`` fall back to the
per-experiment preset (see ``experiments.PRESETS``). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

OUT_ENV = "ENSEMBLEFIT_OUT"


class ConfigError(ValueError):
    """Malformed or unknown configuration (CLI exit code 2)."""


@dataclass
class SyntheticParams:
    """Generator knobs; size and seed come from ``data.image_size`` and the run seed."""

    n_normal: int = 500
    n_defect: int = 500
    confusable_fraction: float = 0.0
    background: tuple[float, float] = (0.45, 0.7)
    noise_std: float = 0.05
    rivets: tuple[int, int] = (1, 3)
    stroke_length: tuple[float, float] = (10.0, 18.0)
    stroke_thickness: float = 1.5
    crack_depth: tuple[float, float] | None = None  # None: preset value
    confusable_depth: tuple[float, float] = (0.005, 0.02)


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "directory"
    path: str | None = None
    defect_labels: tuple[str, ...] = ("defect",)
    label_rules: dict[str, str] = field(default_factory=dict)  # raw-label prefix -> parent class
    ratios: tuple[float, float, float] | None = None  # None: 80/10/10 for exp1, 60/20/20 otherwise
    image_size: tuple[int, int] = (32, 32)
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)
    source_n_per_class: int = 400  # synthetic pretraining task


@dataclass
class AugmentConfig:
    enabled: bool | None = None  # None: on for exp1 only
    flip_h: bool = True
    flip_v: bool = True
    rotation_factor: float = 0.2
    zoom_factor: float = 0.2
    fill_mode: str | None = None  # None: preset value
    interpolation: str | None = None


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.003
    decay: float | None = None  # per-epoch multiplicative LR decay; None: preset
    epochs: int | None = None  # None: 50 / 10 / 20 for exp1 / exp2 / exp3
    optimizer: str = "adam"
    freeze: str = "backbone"  # "backbone" or "none"
    backbones: tuple[str, ...] = ("small", "medium", "wide")
    pretrain_epochs: int = 15


@dataclass
class EnsembleConfig:
    n: int = 3
    mode: str = "min_loss"
    combine: str = "logit"
    threshold: float = 0.5
    lam: float = field(default=1.0, metadata={"key": "lambda"})
    grid_step: float = 0.1


@dataclass
class ConsistencyConfig:
    epsilon: float = 0.001
    window: int = 3
    tail: int | None = None  # None: max(3, ceil(epochs / 4))


@dataclass
class RunConfig:
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    out_dir: str = "runs/default"


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _check(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _check(value, arg, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return _build(tp, value, where)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_check(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_check(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        kt, vt = typing.get_args(tp)
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return {_check(k, kt, where): _check(v, vt, f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {tp!r}")


def _build(cls, doc: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = [k for k in doc if k not in fields]
    if unknown:
        name = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"unknown config key {name!r}")
    kwargs = {}
    for key, value in doc.items():
        f = fields[key]
        kwargs[f.name] = _check(value, hints[f.name], f"{where}.{key}" if where else key)
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    """JSON-ready view of a config, using the external key names."""
    if dataclasses.is_dataclass(cfg):
        return {_key(f): to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, tuple):
        return [to_dict(v) for v in cfg]
    if isinstance(cfg, dict):
        return {k: to_dict(v) for k, v in cfg.items()}
    return cfg


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=VALUE`` (VALUE parsed as JSON, else taken as a string) -> nested dict."""
    path, sep, raw = item.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for part in reversed(path.split(".")):
        value = {part: value}
    return value


def load_json(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def parse_config(path=None, overrides=(), base: dict | None = None) -> RunConfig:
    """Defaults, then ``base``, then the file at ``path``, then ``key=value`` overrides.

    ``ENSEMBLEFIT_OUT`` in the environment replaces ``out_dir``.
    """
    doc = dict(base or {})
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        doc = _merge(doc, load_json(text, str(path)))
    for item in overrides:
        doc = _merge(doc, parse_override(item))
    cfg = _build(RunConfig, doc)
    if os.environ.get(OUT_ENV):
        cfg = dataclasses.replace(cfg, out_dir=os.environ[OUT_ENV])
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.data.source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {cfg.data.source!r}")
    if cfg.data.source == "directory" and not cfg.data.path:
        raise ConfigError("data.path is required when data.source is 'directory'")
    if cfg.data.ratios is not None and (min(cfg.data.ratios) < 0 or abs(sum(cfg.data.ratios) - 1) > 1e-9):
        raise ConfigError("data.ratios must be nonnegative and sum to 1")
    if cfg.train.batch_size < 1 or (cfg.train.epochs is not None and cfg.train.epochs < 1):
        raise ConfigError("train.batch_size and train.epochs must be positive")
    if cfg.train.freeze not in ("backbone", "none"):
        raise ConfigError("train.freeze must be 'backbone' or 'none'")
    if cfg.ensemble.mode not in ("min_loss", "reciprocal", "calibrated"):
        raise ConfigError(f"unknown ensemble.mode {cfg.ensemble.mode!r}")
    if cfg.ensemble.n < 1:
        raise ConfigError("ensemble.n must be >= 1")
    if cfg.consistency.window < 1 or cfg.consistency.epsilon < 0:
        raise ConfigError("consistency.window must be >= 1 and epsilon >= 0")


def write_resolved(cfg: RunConfig, out_dir=None) -> Path:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
