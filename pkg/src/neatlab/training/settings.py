"""Adapter and optimizer settings shared by the training loops and the config loader."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "neat"
    r: int = 32
    depth: int = 2
    activation: str = "relu"
    # None means derive from alpha as alpha / r
    scaling: float | None = None
    alpha: float = 32.0
    dropout: float = 0.05
    residual: bool = False
    output_activation: bool = False
    # empty means every layer
    target_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("neat", "lora"):
            raise ConfigError(f"adapter.kind: expected 'neat' or 'lora', got {self.kind!r}")
        if self.r < 1:
            raise ConfigError(f"adapter.r: must be >= 1, got {self.r}")
        if self.depth < 2 or (self.kind == "lora" and self.depth != 2):
            raise ConfigError(f"adapter.depth: must be >= 2 (exactly 2 for lora), got {self.depth}")
        if self.activation not in ("relu", "sine"):
            raise ConfigError(f"adapter.activation: expected 'relu' or 'sine', got {self.activation!r}")
        if self.scaling is not None and not self.scaling > 0:
            raise ConfigError(f"adapter.scaling: must be positive, got {self.scaling}")
        if not self.alpha > 0:
            raise ConfigError(f"adapter.alpha: must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"adapter.dropout: must lie in [0, 1), got {self.dropout}")

    def resolved_scaling(self) -> float:
        return float(self.scaling) if self.scaling is not None else self.alpha / self.r


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 3e-4
    batch_size: int = 16
    warmup_steps: int = 100
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"optim.epochs: must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"optim.lr: must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"optim.batch_size: must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 0:
            raise ConfigError(f"optim.warmup_steps: must be >= 0, got {self.warmup_steps}")
