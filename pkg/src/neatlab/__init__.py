"""Nonlinear weight adapters (NEAT) and low-rank adapters (LoRA) on a small numpy autodiff core."""

__version__ = "0.1.0"

from .adapters import (  # noqa: E402
    AdaptedLayer,
    FrozenLinear,
    LoraAdapter,
    NeatAdapter,
    adapted_forward,
    init_adapter,
    merge,
    param_count,
)
from .tensor import Tape, Tensor, backward  # noqa: E402

__all__ = [
    "AdaptedLayer",
    "FrozenLinear",
    "LoraAdapter",
    "NeatAdapter",
    "Tape",
    "Tensor",
    "__version__",
    "adapted_forward",
    "backward",
    "init_adapter",
    "merge",
    "param_count",
]
