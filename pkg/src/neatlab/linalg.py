"""Small dense decompositions: one-sided Jacobi SVD, pseudoinverse, projector.

Inputs are plain numpy arrays.  Intended for matrices up to a few hundred
rows or columns; cost is cubic per sweep with a Python-level pair loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = U @ diag(singular_values) @ V.T`` with k = min(d1, d2)."""

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


def _as_matrix(m) -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ShapeError(f"expected a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix has non-finite entries")
    return a


def _jacobi_tall(a: np.ndarray, max_sweeps: int):
    """Orthogonalize the columns of a tall matrix by plane rotations.

    Returns the rotated columns and the accumulated right rotation.
    """
    rows, n = a.shape
    work = np.asfortranarray(a.copy())
    v = np.asfortranarray(np.eye(n))
    tol = rows * EPS
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = work[:, p]
                cq = work[:, q]
                alpha = cp @ cp
                beta = cq @ cq
                gamma = cp @ cq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                work[:, q] = s * cp + c * cq
                work[:, p] = new_p
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            return work, v
    off = work.T @ work
    residual = np.linalg.norm(off - np.diag(np.diag(off)))
    raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps (off-diagonal residual {residual:.3e})")


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns not marked ``filled`` with orthonormal completions."""
    rows = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    candidates = iter(np.eye(rows))
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            x = e.copy()
            for _ in range(2):
                for b in basis:
                    x -= (b @ x) * b
            norm = np.linalg.norm(x)
            if norm > 1e-8:
                u[:, j] = x / norm
                basis.append(u[:, j])
                break
    return u


def svd(m, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    a = _as_matrix(m)
    d1, d2 = a.shape
    flip = d1 < d2
    tall = a.T if flip else a
    work, v = _jacobi_tall(tall, max_sweeps)

    s = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = np.ascontiguousarray(v[:, order])

    filled = s > 0.0
    u = np.zeros_like(work)
    u[:, filled] = work[:, filled] / s[filled]
    if not filled.all():
        u = _complete_basis(u, filled)
    u = np.ascontiguousarray(u)

    if flip:
        u, v = v, u
    # largest-magnitude entry of each left vector made nonnegative
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(U=u * signs, singular_values=s, V=v * signs)


def default_rank_tol(shape: tuple[int, int], sigma_max: float) -> float:
    return max(shape) * EPS * sigma_max


def _kept(result: SvdResult, shape, rank_tol: float | None) -> np.ndarray:
    s = result.singular_values
    tol = default_rank_tol(shape, s[0] if s.size else 0.0) if rank_tol is None else rank_tol
    if tol < 0:
        raise ValueError(f"rank_tol must be nonnegative, got {rank_tol}")
    return s > tol


def pinv(m, rank_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse, dropping singular values at or below ``rank_tol``."""
    a = _as_matrix(m)
    res = svd(a)
    keep = _kept(res, a.shape, rank_tol)
    return (res.V[:, keep] / res.singular_values[keep]) @ res.U[:, keep].T


def left_singular_basis(m, rank_tol: float | None = None) -> np.ndarray:
    """Left singular vectors of ``m`` whose singular values exceed ``rank_tol``.

    May have zero columns when ``m`` is numerically zero.
    """
    a = _as_matrix(m)
    res = svd(a)
    keep = _kept(res, a.shape, rank_tol)
    return res.U[:, keep]


def left_projector(m, rank_tol: float | None = None) -> np.ndarray:
    u = left_singular_basis(m, rank_tol)
    return u @ u.T


def spectral_norm(m) -> float:
    return float(svd(m).singular_values[0])
