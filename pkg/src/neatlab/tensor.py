"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations append nodes to the active :class:`Tape` (entered with ``with``).
Gradients are produced by :func:`backward`, which walks the tape in reverse
and looks up each node's rule in :data:`BACKWARD_RULES`.  The registry is a
plain dict so a test can swap a rule out and check that the gradient checker
notices.

Shapes never broadcast.  Every op validates its inputs and rejects
non-finite results.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

ACTIVATIONS = ("relu", "sine")
TWO_PI = 2.0 * math.pi


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``trainable`` marks leaves that receive gradients.  Results of recorded
    operations carry ``requires_grad`` but never own a ``grad`` buffer.
    """

    __slots__ = ("data", "grad", "trainable", "requires_grad", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite entries in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.trainable = False
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, factor):
        if isinstance(factor, Tensor):
            raise ShapeError("tensor * tensor is not supported; use matmul or scale")
        return scale(self, factor)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of operations for one forward pass.

    Tapes are thread-local when active: ``with Tape() as tape:`` only
    captures operations issued from the entering thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, **ctx) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._result(data, requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.nodes.append(Node(op, tuple(inputs), out, ctx))
    return out


def _require_2d(op: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a matrix, got shape {t.shape}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- forward operations -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    if not math.isfinite(factor):
        raise NumericalError("scale factor must be finite")
    return _emit("scale", (a,), a.data * factor, factor=factor)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_2d("transpose", a)
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape) or math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape).copy(), shape=a.shape)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0))


def sine(a: Tensor) -> Tensor:
    """sin(2*pi*x), the periodic activation."""
    a = as_tensor(a)
    return _emit("sine", (a,), np.sin(TWO_PI * a.data))


def activate(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sine":
        return sine(a)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p)."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    return _emit("dropout", (a,), a.data * mask, mask=mask)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    a = as_tensor(a)
    return _emit("sum", (a,), np.array(a.data.sum()))


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _emit("mean", (a,), np.array(a.data.mean()))


def frobenius_norm(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _emit("frobenius_norm", (a,), np.array(np.sqrt(np.sum(a.data * a.data))))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    return _emit("mse_loss", (pred, target), np.array(np.mean(diff * diff)), diff=diff)


def softmax_cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; ``logits`` is classes x batch, ``labels`` integer per column."""
    logits = as_tensor(logits)
    _require_2d("softmax_cross_entropy_loss", logits)
    labels = np.asarray(labels)
    n_classes, batch = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"softmax_cross_entropy_loss: labels shape {labels.shape}, expected ({batch},)")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"labels must be integers in [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - log_z
    cols = np.arange(batch)
    loss = -log_probs[labels, cols].mean()
    return _emit("softmax_cross_entropy_loss", (logits,), np.array(loss), probs=np.exp(log_probs), labels=labels)


# -- backward rules ---------------------------------------------------------
# Each rule maps (node, upstream gradient) to one gradient per input.


def _matmul_backward(node, g):
    a, b = node.inputs
    return g @ b.data.T, a.data.T @ g


def _add_backward(node, g):
    return g, g


def _sub_backward(node, g):
    return g, -g


def _scale_backward(node, g):
    return (g * node.ctx["factor"],)


def _transpose_backward(node, g):
    return (np.ascontiguousarray(g.T),)


def _reshape_backward(node, g):
    return (g.reshape(node.ctx["shape"]),)


def _relu_backward(node, g):
    # subgradient 0 at the kink
    return (g * (node.inputs[0].data > 0.0),)


def _sine_backward(node, g):
    return (g * TWO_PI * np.cos(TWO_PI * node.inputs[0].data),)


def _dropout_backward(node, g):
    return (g * node.ctx["mask"],)


def _sum_backward(node, g):
    return (np.full(node.inputs[0].shape, float(g)),)


def _mean_backward(node, g):
    x = node.inputs[0]
    return (np.full(x.shape, float(g) / x.size),)


def _frobenius_backward(node, g):
    x = node.inputs[0].data
    norm = float(node.output.data)
    if norm == 0.0:
        return (np.zeros_like(x),)
    return (x * (float(g) / norm),)


def _mse_backward(node, g):
    diff = node.ctx["diff"]
    d = diff * (2.0 * float(g) / diff.size)
    return d, -d


def _softmax_ce_backward(node, g):
    probs = node.ctx["probs"]
    labels = node.ctx["labels"]
    d = probs.copy()
    d[labels, np.arange(labels.size)] -= 1.0
    return (d * (float(g) / labels.size),)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _matmul_backward,
    "add": _add_backward,
    "sub": _sub_backward,
    "scale": _scale_backward,
    "transpose": _transpose_backward,
    "reshape": _reshape_backward,
    "relu": _relu_backward,
    "sine": _sine_backward,
    "dropout": _dropout_backward,
    "sum": _sum_backward,
    "mean": _mean_backward,
    "frobenius_norm": _frobenius_backward,
    "mse_loss": _mse_backward,
    "softmax_cross_entropy_loss": _softmax_ce_backward,
}


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf on the tape.

    Gradients accumulate across calls, so two backward passes over two
    losses leave the gradient of their sum.  Call ``zero_grad`` between steps.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.trainable:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones(())
        return
    if not loss.requires_grad:
        return
    if not any(node.output is loss for node in tape.nodes):
        raise ContractError("loss was not produced by an operation recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = BACKWARD_RULES[node.op](node, g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{node.op} backward produced {gi.shape} for input {inp.shape}")
            if inp.trainable:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` must be deterministic; a stochastic ``f`` (e.g. fresh dropout masks
    per call) makes the estimate meaningless.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
