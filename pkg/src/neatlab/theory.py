"""Numerical checks of the two expressivity results for NEAT.

ReLU case: any LoRA update ``A @ B`` can be reproduced, up to projection on
the left singular space of ``W0``, by a NEAT adapter with twice the hidden
width.  The construction stacks ``pinv(W0) @ A`` and its negation so that
``relu(x) - relu(-x) = x`` restores the identity.  Conversely any r-unit NEAT
delta is a rank-r product.

Sine case: with ``sin(2*pi*x)`` activations and a column ``w`` of ``W0`` with
rationally independent entries, each column ``a_j`` of ``A`` can be hit by
``sin(2*pi*c_j*w)`` for a suitable shift ``c_j`` (Kronecker density).  The
existence argument gives no bound on ``c_j``, so here it becomes a bounded
grid search.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg
from .linalg import EPS

TWO_PI = 2.0 * math.pi


def _relu(x):
    return np.maximum(x, 0.0)


def shallow_delta(w0, theta_in, theta_out, activation: str = "relu") -> np.ndarray:
    """``act(W0 @ theta_in) @ theta_out`` computed directly in numpy."""
    pre = np.asarray(w0) @ np.asarray(theta_in)
    h = _relu(pre) if activation == "relu" else np.sin(TWO_PI * pre)
    return h @ np.asarray(theta_out)


# -- invariant loss --------------------------------------------------------


@dataclass
class InvariantLoss:
    """``L(W) = ||U.T @ W @ X - Z||_F^2`` with ``U`` the left singular basis of W0.

    Because ``U.T @ (U @ U.T) = U.T`` the loss only sees ``U @ U.T @ W``.
    ``reference`` is the weight that generated ``Z`` (a global minimizer).
    """

    U: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    reference: np.ndarray

    def __call__(self, w) -> float:
        r = (self.U.T @ np.asarray(w)) @ self.X - self.Z
        return float(np.sum(r * r))

    def projector(self) -> np.ndarray:
        return self.U @ self.U.T

    def targets(self, x) -> np.ndarray:
        return (self.U.T @ self.reference) @ np.asarray(x)


def build_invariant_loss(w0, n_probes: int, seed: int, rank_tol: float | None = None) -> InvariantLoss:
    if n_probes < 1:
        raise ValueError(f"n_probes must be at least 1, got {n_probes}")
    w0 = np.asarray(w0, dtype=np.float64)
    d1, d2 = w0.shape
    rng = np.random.default_rng(seed)
    u = linalg.left_singular_basis(w0, rank_tol)
    x = rng.standard_normal((d2, n_probes))
    g = rng.standard_normal((d1, d2))
    reference = w0 + g
    z = (u.T @ reference) @ x
    return InvariantLoss(U=u, X=x, Z=z, reference=reference)


# -- ReLU construction -------------------------------------------------------


def prop1_construct(w0, a, b, rank_tol: float | None = None):
    """NEAT parameters with 2r hidden units reproducing ``P @ A @ B``.

    Returns ``(theta_in, theta_out)`` of shapes (d2, 2r) and (2r, d2), where
    ``P`` is the projector onto the column space of ``W0``.
    """
    w0, a, b = (np.asarray(m, dtype=np.float64) for m in (w0, a, b))
    if a.shape[0] != w0.shape[0] or b.shape[1] != w0.shape[1] or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible shapes W0 {w0.shape}, A {a.shape}, B {b.shape}")
    pa = linalg.pinv(w0, rank_tol) @ a
    theta_in = np.hstack([pa, -pa])
    theta_out = np.vstack([b, -b])
    return theta_in, theta_out


def prop1_reverse(w0, theta_in, theta_out):
    """LoRA factors with the same delta as an r-unit ReLU NEAT adapter."""
    a = _relu(np.asarray(w0, dtype=np.float64) @ np.asarray(theta_in, dtype=np.float64))
    return a, np.array(theta_out, dtype=np.float64)


@dataclass
class Prop1Report:
    residual: float
    loss_gap: float
    loss_lora: float
    loss_neat: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance and self.loss_gap <= self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def prop1_verify(w0, a, b, loss: InvariantLoss, rank_tol: float | None = None) -> Prop1Report:
    w0, a, b = (np.asarray(m, dtype=np.float64) for m in (w0, a, b))
    theta_in, theta_out = prop1_construct(w0, a, b, rank_tol)
    neat = shallow_delta(w0, theta_in, theta_out)
    ab = a @ b
    residual = float(np.linalg.norm(neat - loss.projector() @ ab))
    l_lora = loss(w0 + ab)
    l_neat = loss(w0 + neat)
    return Prop1Report(
        residual=residual,
        loss_gap=abs(l_neat - l_lora),
        loss_lora=l_lora,
        loss_neat=l_neat,
        tolerance=1e-9 * max(1.0, float(np.linalg.norm(ab))),
    )


def random_prop1_instance(rng, max_d1=32, max_d2=16, max_r=4, deficient=False):
    d1 = int(rng.integers(1, max_d1 + 1))
    d2 = int(rng.integers(1, max_d2 + 1))
    r = int(rng.integers(1, max_r + 1))
    if deficient:
        k = int(rng.integers(0, min(d1, d2)))
        w0 = rng.standard_normal((d1, k)) @ rng.standard_normal((k, d2))
    else:
        w0 = rng.standard_normal((d1, d2))
    return w0, rng.standard_normal((d1, r)), rng.standard_normal((r, d2))


def reverse_residual(w0, theta_in, theta_out) -> float:
    a, b = prop1_reverse(w0, theta_in, theta_out)
    return float(np.linalg.norm(a @ b - shallow_delta(w0, theta_in, theta_out)))


def prop1_battery(trials: int, seed: int, n_probes: int = 8) -> list[dict]:
    """Construction and reverse checks on alternating full-rank / deficient W0."""
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        w0, a, b = random_prop1_instance(rng, deficient=bool(t % 2))
        loss = build_invariant_loss(w0, n_probes, int(rng.integers(2**31)))
        rep = prop1_verify(w0, a, b, loss)
        d1, d2 = w0.shape
        r = a.shape[1]
        rev = reverse_residual(w0, rng.standard_normal((d2, r)), rng.standard_normal((r, d2)))
        out.append({
            "trial": t, "shape": [d1, d2], "r": r, "deficient": bool(t % 2),
            "reverse_residual": rev, **rep.to_dict(),
        })
    return out


# -- sine construction ------------------------------------------------------


def select_column(w0) -> int:
    """Column whose entries are most spread out (pairwise and from zero).

    Rational independence cannot be tested in floating point; well separated
    nonzero entries are the practical proxy.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    best, best_score = 0, -1.0
    for j in range(w0.shape[1]):
        w = w0[:, j]
        gaps = np.abs(w[:, None] - w[None, :])[np.triu_indices(w.size, 1)]
        score = min(np.abs(w).min(), gaps.min() if gaps.size else np.inf)
        if score > best_score:
            best, best_score = j, score
    return best


def _circ(x):
    d = np.abs(x - np.floor(x))
    return np.minimum(d, 1.0 - d)


def fractional_mismatch(c, w, target) -> np.ndarray:
    """Circular distance between the fractional parts of ``c*w`` and ``target``."""
    return _circ(c * np.asarray(w) - target)


def arcsin_targets(a) -> np.ndarray:
    return np.mod(np.arcsin(np.clip(a, -1.0, 1.0)) / TWO_PI, 1.0)


def grid_size(c_max: float, grid_step: float) -> int:
    return int(math.floor(c_max / grid_step + 1e-9))


def search_shift(w, target, c_max: float, grid_step: float, block: int = 128):
    """Grid point ``c = k*grid_step``, ``1 <= k <= c_max/grid_step``, minimizing
    ``max_i dist(frac(c*w_i), target_i)`` on the circle.

    Equivalent to an exhaustive scan (first index wins ties) but prunes blocks
    of ``block`` consecutive grid points with the bound
    ``dist(c) >= dist(c0) - max|w| * |c - c0|``.
    Returns ``(k, distance, evaluations)``.
    """
    w = np.asarray(w, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = grid_size(c_max, grid_step)
    if n < 1:
        raise ValueError(f"empty grid: c_max={c_max}, grid_step={grid_step}")
    lip = float(np.abs(w).max()) if w.size else 0.0
    n_blocks = -(-n // block)
    lo = np.arange(n_blocks, dtype=np.int64) * block + 1
    hi = np.minimum(lo + block - 1, n)
    lower = np.empty(n_blocks)
    chunk = 1 << 16
    for s in range(0, n_blocks, chunk):
        centre = (lo[s : s + chunk] + hi[s : s + chunk]) * (0.5 * grid_step)
        radius = (hi[s : s + chunk] - lo[s : s + chunk]) * (0.5 * grid_step)
        dist = _circ(centre[:, None] * w[None, :] - target[None, :]).max(axis=1)
        lower[s : s + chunk] = dist - lip * radius
    evaluations = n_blocks
    best_d, best_k = np.inf, -1
    for b in np.argsort(lower, kind="stable"):
        if lower[b] > best_d:
            break
        ks = np.arange(lo[b], hi[b] + 1, dtype=np.int64)
        dist = _circ((ks * grid_step)[:, None] * w[None, :] - target[None, :]).max(axis=1)
        evaluations += ks.size
        i = int(np.argmin(dist))
        if dist[i] < best_d or (dist[i] == best_d and ks[i] < best_k):
            best_d, best_k = float(dist[i]), int(ks[i])
    return best_k, best_d, evaluations


@dataclass
class Prop2SearchReport:
    column: int
    shifts: list[float]
    column_errors: list[float]
    achieved_error: float
    target_norm: float
    b_norm: float
    rank: int
    scale: float
    eps: float
    c_max: float
    grid_step: float
    grid_points: int
    evaluations: int
    theta_in: np.ndarray = field(repr=False)
    theta_out: np.ndarray = field(repr=False)

    @property
    def bound(self) -> float:
        return TWO_PI * self.b_norm * math.sqrt(self.rank) * max(self.column_errors, default=0.0)

    @property
    def relative_error(self) -> float:
        return self.achieved_error / self.target_norm if self.target_norm > 0 else self.achieved_error

    @property
    def converged(self) -> bool:
        return self.achieved_error <= self.eps

    def rounding_allowance(self) -> float:
        d1 = self.theta_in.shape[0] if self.theta_in.ndim else 1
        return 64 * EPS * (self.target_norm + self.b_norm * math.sqrt(max(d1, 1) * self.rank))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("theta_in")
        d.pop("theta_out")
        d.update(bound=self.bound, relative_error=self.relative_error, converged=self.converged)
        return d


def prop2_search(w0, a, b, eps: float, c_max: float = 1e4, grid_step: float = 1e-4, column: int | None = None) -> Prop2SearchReport:
    """Sine-activated NEAT parameters approximating ``A @ B``.

    ``A`` is rescaled to ``max|A| = 1`` with the factor moved into ``B``.  For
    every column ``a_j`` the shift ``c_j`` minimizes the max-norm mismatch
    between ``frac(c_j * w)`` and ``arcsin(a_j) / (2*pi)``; the reported
    per-column error is the Euclidean norm of that mismatch, which is what
    makes ``2*pi*||B||*sqrt(r)*max_j err_j`` an upper bound on the result.
    """
    w0, a, b = (np.asarray(m, dtype=np.float64) for m in (w0, a, b))
    d1, d2 = w0.shape
    if a.shape[0] != d1 or b.shape[1] != d2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible shapes W0 {w0.shape}, A {a.shape}, B {b.shape}")
    r = a.shape[1]
    j_star = select_column(w0) if column is None else int(column)
    w = w0[:, j_star]

    m = float(np.abs(a).max())
    scale = m if m > 0 else 1.0
    a_unit = a / scale
    b_scaled = b * scale

    shifts, errors, evals = [], [], 0
    for j in range(r):
        target = arcsin_targets(a_unit[:, j])
        k, _, n_eval = search_shift(w, target, c_max, grid_step)
        c = k * grid_step
        evals += n_eval
        shifts.append(c)
        errors.append(float(np.linalg.norm(fractional_mismatch(c, w, target))))

    theta_in = np.zeros((d2, r))
    theta_in[j_star, :] = shifts
    ab = a @ b
    approx = shallow_delta(w0, theta_in, b_scaled, activation="sine")
    return Prop2SearchReport(
        column=j_star,
        shifts=shifts,
        column_errors=errors,
        achieved_error=float(np.linalg.norm(ab - approx)),
        target_norm=float(np.linalg.norm(ab)),
        b_norm=linalg.spectral_norm(b_scaled),
        rank=r,
        scale=scale,
        eps=float(eps),
        c_max=float(c_max),
        grid_step=float(grid_step),
        grid_points=grid_size(c_max, grid_step),
        evaluations=evals,
        theta_in=theta_in,
        theta_out=b_scaled,
    )


def prop2_bound_check(report: Prop2SearchReport) -> bool:
    """Achieved error is within the analytic bound (plus float rounding allowance)."""
    return report.achieved_error <= report.bound + report.rounding_allowance()


def random_prop2_instance(rng, d1=6, d2=4, r=2):
    return rng.uniform(size=(d1, d2)), rng.standard_normal((d1, r)), rng.standard_normal((r, d2))


def planted_prop2_instance(rng, d1=4, d2=3, r=2, c_max=10.0, grid_step=1e-4):
    """Instance whose ``A`` is exactly ``sin(2*pi*W0 @ theta)`` for grid shifts.

    Column 0 of ``W0`` carries the shifts.  Its first entry is 0.25 and the
    first shift is 1, so ``max|A| = 1`` exactly and rescaling leaves ``A``
    unchanged.  All phases are kept on the principal arcsin branch.
    Returns ``(W0, A, B, column, shifts)``.
    """
    w0 = rng.uniform(size=(d1, d2))
    w = np.concatenate([[0.25], np.where(rng.random(d1 - 1) < 0.5, rng.uniform(0.0, 0.25, d1 - 1), rng.uniform(0.75, 1.0, d1 - 1))])
    w0[:, 0] = w
    n = grid_size(c_max, grid_step)
    k_one = int(round(1.0 / grid_step))
    ks = [k_one]
    while len(ks) < r:
        k = int(rng.integers(1, n + 1))
        phase = np.mod(k * grid_step * w, 1.0)
        if np.all((phase <= 0.25) | (phase >= 0.75)):
            ks.append(k)
    shifts = [k * grid_step for k in ks]
    theta = np.zeros((d2, r))
    theta[0, :] = shifts
    a = np.sin(TWO_PI * (w0 @ theta))
    return w0, a, rng.standard_normal((r, d2)), 0, shifts


def prop2_battery(trials: int, seed: int, mode: str = "random", c_max: float = 1e4, grid_step: float = 1e-4, rel_eps: float = 0.1) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        if mode == "planted":
            w0, a, b, col, _ = planted_prop2_instance(rng, c_max=c_max, grid_step=grid_step)
        elif mode == "random":
            (w0, a, b), col = random_prop2_instance(rng), None
        else:
            raise ValueError(f"unknown prop2 mode {mode!r}")
        eps = rel_eps * float(np.linalg.norm(a @ b))
        rep = prop2_search(w0, a, b, eps, c_max=c_max, grid_step=grid_step, column=col)
        out.append({"trial": t, "mode": mode, "bound_ok": prop2_bound_check(rep), **rep.to_dict()})
    return out
