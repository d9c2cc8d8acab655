"""Synthetic and tabular tasks.

Data matrices are feature-major: inputs are (d_in, n) so that a layer
computes ``W @ x``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import theory
from ..errors import ParseError

TASK_KINDS = ("teacher_regression", "invariant_shift", "csv_classification")

# independent random streams per purpose, so e.g. the teacher shift does not
# change the sampled inputs
_STREAM_TEACHER, _STREAM_SHIFT, _STREAM_INPUT, _STREAM_NOISE, _STREAM_SPLIT = range(5)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "teacher_regression"
    d_in: int = 8
    d_out: int = 4
    hidden: tuple[int, ...] = (16,)
    n_train: int = 256
    n_val: int = 64
    noise: float = 0.0
    shift: float = 0.0
    seed: int = 0
    csv_path: str | None = None
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind != "csv_classification":
            if min(self.d_in, self.d_out, self.n_train, self.n_val) < 1:
                raise ValueError("task dimensions and sample counts must be at least 1")
        elif not self.csv_path:
            raise ValueError("csv_classification needs csv_path")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


@dataclass
class Dataset:
    problem: str  # "regression" | "classification"
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int = 0
    teacher: list[np.ndarray] = field(default_factory=list)
    base_weight: np.ndarray | None = None
    readout: np.ndarray | None = None
    invariant_loss: theory.InvariantLoss | None = None
    full_batch: bool = False

    @property
    def d_in(self) -> int:
        return self.x_train.shape[0]

    @property
    def d_out(self) -> int:
        return self.n_classes if self.problem == "classification" else self.y_train.shape[0]

    def split(self, name: str):
        if name == "train":
            return self.x_train, self.y_train
        if name == "val":
            return self.x_val, self.y_val
        raise ValueError(f"unknown split {name!r}")


def teacher_forward(weights, x):
    h = x
    for i, w in enumerate(weights):
        h = w @ h
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h


def _teacher_task(spec: TaskSpec) -> Dataset:
    width = spec.hidden[0] if spec.hidden else 16
    rng = _rng(spec.seed, _STREAM_TEACHER)
    w1 = rng.standard_normal((width, spec.d_in)) / math.sqrt(spec.d_in)
    w2 = rng.standard_normal((spec.d_out, width)) / math.sqrt(width)
    if spec.shift:
        srng = _rng(spec.seed, _STREAM_SHIFT)
        w1 = w1 + spec.shift * srng.standard_normal(w1.shape) / math.sqrt(spec.d_in)
        w2 = w2 + spec.shift * srng.standard_normal(w2.shape) / math.sqrt(width)
    teacher = [w1, w2]
    xr = _rng(spec.seed, _STREAM_INPUT)
    x_train = xr.standard_normal((spec.d_in, spec.n_train))
    x_val = xr.standard_normal((spec.d_in, spec.n_val))
    y_train = teacher_forward(teacher, x_train)
    y_val = teacher_forward(teacher, x_val)
    if spec.noise:
        nr = _rng(spec.seed, _STREAM_NOISE)
        y_train = y_train + spec.noise * nr.standard_normal(y_train.shape)
        y_val = y_val + spec.noise * nr.standard_normal(y_val.shape)
    return Dataset("regression", x_train, y_train, x_val, y_val, teacher=teacher)


def _invariant_task(spec: TaskSpec) -> Dataset:
    # base weight W0 is (d_out x d_in); targets live in its left singular space
    w0 = _rng(spec.seed, _STREAM_TEACHER).standard_normal((spec.d_out, spec.d_in)) / math.sqrt(spec.d_in)
    loss = theory.build_invariant_loss(w0, spec.n_train, int(_rng(spec.seed, _STREAM_SHIFT).integers(2**31)))
    x_val = _rng(spec.seed, _STREAM_INPUT).standard_normal((spec.d_in, spec.n_val))
    z_train, z_val = loss.Z, loss.targets(x_val)
    if spec.noise:
        nr = _rng(spec.seed, _STREAM_NOISE)
        z_train = z_train + spec.noise * nr.standard_normal(z_train.shape)
        z_val = z_val + spec.noise * nr.standard_normal(z_val.shape)
    return Dataset(
        "regression", loss.X, z_train, x_val, z_val,
        base_weight=w0, readout=np.ascontiguousarray(loss.U.T), invariant_loss=loss, full_batch=True,
    )


def load_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a classification CSV: header, float feature columns, integer label last.

    Returns (features n x d, labels n, header).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from exc
    rows, labels = [], []
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty", line=1) from None
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path} is not valid UTF-8: {exc}", line=1) from None
        if len(header) < 2:
            raise ParseError("header needs at least one feature column and a label column", line=1)
        width = len(header)
        try:
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != width:
                    raise ParseError(f"expected {width} fields, got {len(row)}", line=line_no)
                if any(cell.strip() == "" for cell in row):
                    raise ParseError("missing value", line=line_no)
                try:
                    feats = [float(cell) for cell in row[:-1]]
                except ValueError as exc:
                    raise ParseError(f"bad feature value: {exc}", line=line_no) from None
                if not all(math.isfinite(v) for v in feats):
                    raise ParseError("non-finite feature value", line=line_no)
                try:
                    label = int(row[-1])
                except ValueError:
                    raise ParseError(f"label {row[-1]!r} is not an integer", line=line_no) from None
                if label < 0:
                    raise ParseError(f"label {label} is negative", line=line_no)
                rows.append(feats)
                labels.append(label)
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path} is not valid UTF-8: {exc}") from None
    if not rows:
        raise ParseError(f"{path} has no data rows", line=2)
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), header


def _csv_task(spec: TaskSpec) -> Dataset:
    feats, labels, _ = load_csv(spec.csv_path)
    n = labels.size
    order = _rng(spec.seed, _STREAM_SPLIT).permutation(n)
    n_val = min(n - 1, max(1, int(round(spec.val_fraction * n)))) if n > 1 else 0
    val, train = order[:n_val], order[n_val:]
    if n_val == 0:
        val = train
    x = np.ascontiguousarray(feats.T)
    return Dataset(
        "classification", x[:, train], labels[train], x[:, val], labels[val],
        n_classes=int(labels.max()) + 1,
    )


def make_task(spec: TaskSpec) -> Dataset:
    if spec.kind == "teacher_regression":
        return _teacher_task(spec)
    if spec.kind == "invariant_shift":
        return _invariant_task(spec)
    return _csv_task(spec)
