"""NEAT and LoRA adapters over frozen linear layers.

Orientation follows ``y = W @ x`` with ``W`` of shape (d1, d2), ``x`` of
shape (d2, batch).  A NEAT adapter maps the frozen weight itself through a
bottleneck network::

    H0 = act(W0 @ theta_in)                      (d1 x r)
    H  = H + act(H @ M)  or  act(H @ M)          per intermediate M (r x r)
    dW = s * (H @ theta_out)                     (d1 x d2)

LoRA uses ``dW = s * A @ B``.  Both initialize their output factor at zero so
that the adapted layer starts out equal to the frozen one.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigWarning, ContractError, ShapeError
from .tensor import Tensor

ADAPTER_KINDS = ("neat", "lora")


@dataclass(frozen=True, eq=False)
class FrozenLinear:
    """Pretrained weight, stored read-only."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2 or 0 in w.shape:
            raise ShapeError(f"frozen weight must be a non-empty matrix, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def tensor(self) -> Tensor:
        return Tensor(self.weight, copy=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(self.tensor(), x)

    def checksum(self) -> str:
        return hashlib.sha256(self.weight.tobytes()).hexdigest()


def _check_common(scaling, dropout_p):
    if not scaling > 0:
        raise ValueError(f"scaling must be positive, got {scaling}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must lie in [0, 1), got {dropout_p}")


@dataclass(eq=False)
class NeatAdapter:
    theta_in: Tensor
    theta_out: Tensor
    intermediates: list[Tensor] = field(default_factory=list)
    activation: str = "relu"
    scaling: float = 1.0
    residual: bool = False
    dropout_p: float = 0.0
    output_activation: bool = False

    kind = "neat"

    def __post_init__(self):
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        _check_common(self.scaling, self.dropout_p)
        d2, r = self.theta_in.shape
        for k, m in enumerate(self.intermediates):
            if m.shape != (r, r):
                raise ShapeError(f"intermediate[{k}] has shape {m.shape}, expected {(r, r)}")
        if self.theta_out.shape != (r, d2):
            raise ShapeError(f"theta_out has shape {self.theta_out.shape}, expected {(r, d2)}")

    @property
    def rank(self) -> int:
        return self.theta_in.shape[1]

    @property
    def depth(self) -> int:
        return 2 + len(self.intermediates)

    def parameters(self) -> list[Tensor]:
        return [self.theta_in, *self.intermediates, self.theta_out]

    def hyperparameters(self) -> dict:
        return {
            "activation": self.activation,
            "scaling": self.scaling,
            "residual": self.residual,
            "dropout_p": self.dropout_p,
            "output_activation": self.output_activation,
        }


@dataclass(eq=False)
class LoraAdapter:
    A: Tensor
    B: Tensor
    scaling: float = 1.0
    dropout_p: float = 0.0

    kind = "lora"

    def __post_init__(self):
        _check_common(self.scaling, self.dropout_p)
        if self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"LoRA factors do not chain: A {self.A.shape}, B {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def depth(self) -> int:
        return 2

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def hyperparameters(self) -> dict:
        return {"scaling": self.scaling, "dropout_p": self.dropout_p}


@dataclass(eq=False)
class AdaptedLayer:
    base: FrozenLinear
    adapter: NeatAdapter | LoraAdapter | None = None
    layer_index: int = 0


def neat_delta(base: FrozenLinear, adapter: NeatAdapter, training: bool = False, rng=None) -> Tensor:
    d1, d2 = base.shape
    if adapter.theta_in.shape[0] != d2:
        raise ShapeError(f"theta_in: expected {d2} rows to match W0 {base.shape}, got {adapter.theta_in.shape}")
    if adapter.theta_out.shape[1] != d2:
        raise ShapeError(f"theta_out: expected {d2} columns to match W0 {base.shape}, got {adapter.theta_out.shape}")
    act = adapter.activation
    h = T.activate(T.matmul(base.tensor(), adapter.theta_in), act)
    if training and adapter.dropout_p > 0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        h = T.dropout(h, adapter.dropout_p, rng)
    for m in adapter.intermediates:
        z = T.activate(T.matmul(h, m), act)
        h = T.add(h, z) if adapter.residual else z
    out = T.matmul(h, adapter.theta_out)
    if adapter.output_activation:
        out = T.activate(out, act)
    return T.scale(out, adapter.scaling)


def lora_delta(adapter: LoraAdapter, training: bool = False) -> Tensor:
    # dropout acts on the layer input, so the delta itself is mode independent
    return T.scale(T.matmul(adapter.A, adapter.B), adapter.scaling)


def delta(layer: AdaptedLayer, training: bool = False, rng=None) -> Tensor | None:
    ad = layer.adapter
    if ad is None:
        return None
    if isinstance(ad, NeatAdapter):
        return neat_delta(layer.base, ad, training, rng)
    d = lora_delta(ad, training)
    if d.shape != layer.base.shape:
        raise ShapeError(f"LoRA delta {d.shape} does not match W0 {layer.base.shape}")
    return d


def adapted_forward(layer: AdaptedLayer, x: Tensor, training: bool = False, rng=None) -> Tensor:
    d1, d2 = layer.base.shape
    if x.data.ndim != 2 or x.shape[0] != d2:
        raise ShapeError(f"layer input has shape {x.shape}, expected ({d2}, batch)")
    w = layer.base.tensor()
    ad = layer.adapter
    if ad is None:
        return T.matmul(w, x)
    dw = delta(layer, training, rng)
    if isinstance(ad, LoraAdapter) and training and ad.dropout_p > 0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        return T.add(T.matmul(w, x), T.matmul(dw, T.dropout(x, ad.dropout_p, rng)))
    return T.matmul(T.add(w, dw), x)


def _gaussian(rng, rows, cols, fan_in, name):
    return Tensor(rng.standard_normal((rows, cols)) / np.sqrt(fan_in), trainable=True, name=name)


def init_adapter(
    kind: str,
    dims: tuple[int, int, int, int],
    seed: int,
    *,
    activation: str = "relu",
    scaling: float = 1.0,
    residual: bool = False,
    dropout_p: float = 0.0,
    output_activation: bool = False,
):
    """Fresh adapter whose delta is exactly zero.

    ``dims`` is (d1, d2, r, depth).  Input and intermediate factors are drawn
    from N(0, 1/fan_in); the output factor (NEAT ``theta_out``, LoRA ``B``)
    starts at zero.
    """
    d1, d2, r, depth = (int(v) for v in dims)
    if min(d1, d2, r) < 1:
        raise ValueError(f"dimensions must be positive, got {dims}")
    if r >= min(d1, d2):
        warnings.warn(f"rank {r} is not below min(d1, d2) = {min(d1, d2)}", ConfigWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    if kind == "neat":
        if depth < 2:
            raise ValueError(f"NEAT depth must be at least 2, got {depth}")
        theta_in = _gaussian(rng, d2, r, d2, "theta_in")
        mids = [_gaussian(rng, r, r, r, f"intermediate{k}") for k in range(depth - 2)]
        theta_out = Tensor(np.zeros((r, d2)), trainable=True, name="theta_out")
        return NeatAdapter(
            theta_in, theta_out, mids,
            activation=activation, scaling=scaling, residual=residual,
            dropout_p=dropout_p, output_activation=output_activation,
        )
    if kind == "lora":
        if depth != 2:
            raise ValueError(f"LoRA has depth 2, got {depth}")
        a = _gaussian(rng, d1, r, r, "A")
        b = Tensor(np.zeros((r, d2)), trainable=True, name="B")
        return LoraAdapter(a, b, scaling=scaling, dropout_p=dropout_p)
    raise ValueError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")


def param_count(adapter) -> int:
    if adapter is None:
        return 0
    if isinstance(adapter, LoraAdapter):
        d1, r = adapter.A.shape
        d2 = adapter.B.shape[1]
        return r * (d1 + d2)
    d2, r = adapter.theta_in.shape
    return 2 * r * d2 + (adapter.depth - 2) * r * r


def merge(layer: AdaptedLayer) -> FrozenLinear:
    """Fold the evaluation-mode delta into a new frozen weight."""
    if layer.adapter is None:
        raise ContractError("merge needs an adapter on the layer")
    dw = delta(layer, training=False)
    return FrozenLinear(layer.base.weight + dw.data)
