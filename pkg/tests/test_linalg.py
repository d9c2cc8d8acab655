import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neatlab import linalg
from neatlab.errors import NumericalError, ShapeError


def random_matrix(seed, d1, d2, rank=None):
    r = np.random.default_rng(seed)
    if rank is None:
        return r.standard_normal((d1, d2))
    return r.standard_normal((d1, rank)) @ r.standard_normal((rank, d2))


shapes = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))


def test_known_singular_values_and_pinv():
    m = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    # eigenvalues of m^T m = [[35, 44], [44, 56]] in closed form
    disc = math.sqrt(91.0**2 - 4 * 24.0)
    expected = [math.sqrt((91 + disc) / 2), math.sqrt((91 - disc) / 2)]
    np.testing.assert_allclose(linalg.svd(m).singular_values, expected, rtol=1e-14)
    # (m^T m)^{-1} m^T worked by hand
    np.testing.assert_allclose(
        linalg.pinv(m), [[-4 / 3, -1 / 3, 2 / 3], [13 / 12, 1 / 3, -5 / 12]], rtol=1e-13, atol=1e-14
    )


def test_diagonal_matrix_singular_values():
    res = linalg.svd(np.diag([2.0, -3.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 2.0], rtol=1e-15)
    np.testing.assert_allclose(res.reconstruct(), np.diag([2.0, -3.0]), atol=1e-15)


def test_zero_matrix():
    res = linalg.svd(np.zeros((4, 3)))
    np.testing.assert_array_equal(res.singular_values, 0.0)
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(3), atol=1e-14)
    np.testing.assert_array_equal(linalg.pinv(np.zeros((4, 3))), np.zeros((3, 4)))
    assert linalg.left_singular_basis(np.zeros((4, 3))).shape == (4, 0)


@given(shapes)
def test_svd_factors_are_orthonormal_and_reconstruct(shape):
    d1, d2, seed = shape
    m = random_matrix(seed, d1, d2)
    res = linalg.svd(m)
    k = min(d1, d2)
    assert res.U.shape == (d1, k) and res.V.shape == (d2, k)
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(k), atol=1e-13)
    np.testing.assert_allclose(res.V.T @ res.V, np.eye(k), atol=1e-13)
    np.testing.assert_allclose(res.reconstruct(), m, atol=1e-12 * max(1.0, np.abs(m).max()))
    assert np.all(np.diff(res.singular_values) <= 0)


@given(shapes)
def test_singular_values_match_lapack(shape):
    d1, d2, seed = shape
    m = random_matrix(seed, d1, d2)
    ref = np.linalg.svd(m, compute_uv=False)
    np.testing.assert_allclose(linalg.svd(m).singular_values, ref, rtol=1e-12, atol=1e-13)


@given(shapes)
def test_sign_convention(shape):
    d1, d2, seed = shape
    u = linalg.svd(random_matrix(seed, d1, d2)).U
    pivots = np.argmax(np.abs(u), axis=0)
    assert np.all(u[pivots, np.arange(u.shape[1])] >= 0)


@given(shapes.flatmap(lambda s: st.tuples(st.just(s), st.integers(0, min(s[0], s[1])))))
def test_pinv_penrose_identities(args):
    (d1, d2, seed), rank = args
    m = random_matrix(seed, d1, d2, rank)
    p = linalg.pinv(m)
    scale = max(1.0, np.abs(m).max()) * max(1.0, np.abs(p).max())
    tol = 1e-10 * scale**2
    np.testing.assert_allclose(m @ p @ m, m, atol=tol)
    np.testing.assert_allclose(p @ m @ p, p, atol=tol)
    np.testing.assert_allclose((m @ p).T, m @ p, atol=tol)
    np.testing.assert_allclose((p @ m).T, p @ m, atol=tol)
    np.testing.assert_allclose(p, np.linalg.pinv(m), atol=tol)


@given(shapes.flatmap(lambda s: st.tuples(st.just(s), st.integers(0, min(s[0], s[1])))))
def test_projector_rank_and_idempotence(args):
    (d1, d2, seed), rank = args
    m = random_matrix(seed, d1, d2, rank)
    u = linalg.left_singular_basis(m)
    assert u.shape[1] == np.linalg.matrix_rank(m)
    p = linalg.left_projector(m)
    np.testing.assert_allclose(p @ p, p, atol=1e-12)
    np.testing.assert_allclose(p @ m, m, atol=1e-11 * max(1.0, np.abs(m).max()))
    # W0 W0^+ is the same projector
    np.testing.assert_allclose(m @ linalg.pinv(m), p, atol=1e-10)


def test_rank_tolerance_drops_small_values():
    m = np.diag([1.0, 1e-3, 1e-20])
    assert linalg.left_singular_basis(m).shape[1] == 2
    assert linalg.left_singular_basis(m, rank_tol=1e-2).shape[1] == 1
    with pytest.raises(ValueError):
        linalg.pinv(m, rank_tol=-1.0)


def test_spectral_norm():
    assert linalg.spectral_norm(np.array([[3.0, 0.0], [4.0, 0.0]])) == pytest.approx(5.0, rel=1e-15)


def test_input_validation():
    with pytest.raises(ShapeError):
        linalg.svd(np.ones(3))
    with pytest.raises(NumericalError):
        linalg.svd(np.array([[np.inf]]))


def test_non_convergence_is_reported():
    with pytest.raises(NumericalError, match="residual"):
        linalg.svd(random_matrix(0, 8, 6), max_sweeps=1)
