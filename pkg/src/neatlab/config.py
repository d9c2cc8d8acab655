"""Experiment configuration: dataclass schema, TOML/JSON loading, validation.

Every section maps to a frozen dataclass whose defaults document the schema.
Unknown sections or keys are rejected so that a typo cannot silently fall
back to a default.  Adapter and optimizer defaults: hidden dim 32,
alpha 32, dropout 0.05, AdamW, lr 3e-4, batch 16, 100 warmup steps, 1 epoch.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .training.settings import AdapterConfig, TrainConfig
from .training.tasks import TaskSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUT_DIR_ENV = "NEATLAB_OUT_DIR"
MODES = ("finetune", "compare", "sweep")
SWEEP_AXES = ("depth", "activation", "targeting")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (16,)
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-2
    pretrain_batch_size: int = 32

    def __post_init__(self):
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"model.hidden: widths must be >= 1, got {self.hidden}")
        if self.pretrain_epochs < 0:
            raise ConfigError("model.pretrain_epochs: must be >= 0")

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.pretrain_epochs, lr=self.pretrain_lr,
            batch_size=self.pretrain_batch_size, warmup_steps=0,
        )


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "depth"
    values: tuple = (2, 4, 6)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis: expected one of {SWEEP_AXES}, got {self.axis!r}")


@dataclass(frozen=True)
class ExperimentSection:
    mode: str = "finetune"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = ""
    workers: int = 1
    checkpoint: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"experiment.mode: expected one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("experiment.seeds: at least one seed is required")
        if self.workers < 1:
            raise ConfigError("experiment.workers: must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    optim: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def out_dir(self) -> Path:
        return Path(self.experiment.out_dir or os.environ.get(OUT_DIR_ENV, "runs"))

    def to_dict(self) -> dict:
        """Resolved config: plain JSON types, scaling made explicit."""
        d = dataclasses.asdict(self)
        d["adapter"]["scaling"] = self.adapter.resolved_scaling()
        return _jsonable(d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(section: str, name: str, hint, value):
    where = f"{section}.{name}"
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(section, name, inner[0], value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if args and args[-1] is Ellipsis:
            return tuple(_coerce(section, name, args[0], v) for v in value)
        return tuple(value)
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(section: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    kwargs = {k: _coerce(section, k, hints[k], v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}; allowed: {', '.join(_SECTIONS)}")
    hints = typing.get_type_hints(ExperimentConfig)
    sections = {name: _build_section(name, hints[name], raw[name]) for name in raw}
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
