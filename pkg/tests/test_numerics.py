import numpy as np
import pytest
import scipy.linalg
import scipy.stats
from hypothesis import given, strategies as st

from geosharp.numerics import (
    SeededRng, SingularOperatorError, kendall_tau, sample_gl_matrix, sample_rademacher,
    solve_sylvester, sylvester_solve, thin_qr,
)


# ---------------------------------------------------------------- SeededRng

def test_rng_streams_reproducible_and_distinct():
    a = SeededRng(7).derive(3).generator.standard_normal(5)
    b = SeededRng(7).derive(3).generator.standard_normal(5)
    c = SeededRng(7).derive(4).generator.standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_rng_derive_does_not_advance_parent():
    r = SeededRng(1)
    before = SeededRng(1).generator.standard_normal(3)
    r.derive(0).generator.standard_normal(100)
    np.testing.assert_array_equal(r.generator.standard_normal(3), before)


@pytest.mark.parametrize("seed", [-1, 1 << 64])
def test_rng_rejects_out_of_range_seed(seed):
    with pytest.raises(ValueError):
        SeededRng(seed)


def test_rng_accepts_max_u64():
    SeededRng((1 << 64) - 1).derive((1 << 64) - 1)


# ---------------------------------------------------------------- Sylvester

def test_sylvester_known_solution():
    # A Λ + Λ Aᵀ = B with A = diag(1, 2) gives Λ_ij = B_ij / (a_i + a_j)
    A = np.diag([1.0, 2.0])
    B = np.array([[2.0, 3.0], [3.0, 8.0]])
    np.testing.assert_allclose(sylvester_solve(A, B), [[1.0, 1.0], [1.0, 2.0]], atol=1e-14)


@given(h=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_sylvester_matches_scipy(h, seed):
    g = np.random.default_rng(seed)
    A = g.standard_normal((h, h)) + 3 * h * np.eye(h)
    C = g.standard_normal((h, h)) + 3 * h * np.eye(h)
    B = g.standard_normal((h, h))
    X = solve_sylvester(A, C, B)
    np.testing.assert_allclose(X, scipy.linalg.solve_sylvester(A, C, B), rtol=1e-9, atol=1e-12)


def test_sylvester_batched_equals_loop(gen):
    A = gen.standard_normal((4, 3, 3)) + 5 * np.eye(3)
    C = gen.standard_normal((4, 3, 3)) + 5 * np.eye(3)
    B = gen.standard_normal((4, 3, 3))
    X = solve_sylvester(A, C, B)
    for i in range(4):
        np.testing.assert_allclose(X[i], solve_sylvester(A[i], C[i], B[i]), atol=1e-14)


def test_sylvester_singular_raises():
    A = np.diag([1.0, -1.0])
    with pytest.raises(SingularOperatorError):
        solve_sylvester(A, -A, np.eye(2))


def test_sylvester_rejects_nonfinite():
    with pytest.raises(ValueError):
        sylvester_solve(np.array([[np.nan]]), np.eye(1))


# ------------------------------------------------------------------- thin_qr

@given(D=st.integers(1, 12), k=st.integers(0, 12), seed=st.integers(0, 2**32 - 1))
def test_thin_qr_orthonormal_and_spans(D, k, seed):
    k = min(k, D)
    M = np.random.default_rng(seed).standard_normal((D, k))
    Q = thin_qr(M)
    assert Q.shape == (D, k)
    np.testing.assert_allclose(Q.T @ Q, np.eye(k), atol=1e-12)
    np.testing.assert_allclose(Q @ (Q.T @ M), M, atol=1e-10)


def test_thin_qr_rank_deficient():
    M = np.ones((5, 3))
    Q = thin_qr(M)
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)


def test_thin_qr_rejects_wide():
    with pytest.raises(ValueError):
        thin_qr(np.zeros((2, 3)))


# ---------------------------------------------------------------- sampling

def test_rademacher_values_and_balance():
    x = sample_rademacher(20000, SeededRng(0))
    assert set(np.unique(x)) == {-1.0, 1.0}
    assert abs(x.mean()) < 0.03


@given(h=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_gl_matrix_spectrum(h, seed):
    A, lam = sample_gl_matrix(h, SeededRng(seed), return_eigenvalues=True)
    assert np.all((np.abs(lam) >= 1) & (np.abs(lam) <= 10))
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(A)), np.sort(lam), atol=1e-10)


# -------------------------------------------------------------- kendall_tau

def test_kendall_tau_unit_triple():
    assert kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    assert kendall_tau([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(2 / 3)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30, unique=True), st.integers(0, 2**32 - 1))
def test_kendall_tau_matches_scipy_without_ties(t, seed):
    s = np.random.default_rng(seed).permutation(len(t)).astype(float)
    assert kendall_tau(t, s) == pytest.approx(scipy.stats.kendalltau(t, s).statistic, abs=1e-12)


@given(st.lists(st.integers(-3, 3), min_size=2, max_size=20))
def test_kendall_tau_antisymmetric_and_bounded(t):
    s = list(range(len(t)))
    tau = kendall_tau(t, s)
    assert -1.0 <= tau <= 1.0
    assert kendall_tau(t, s[::-1]) == pytest.approx(-tau)


def test_kendall_tau_errors():
    with pytest.raises(ValueError):
        kendall_tau([1.0], [1.0])
    with pytest.raises(ValueError):
        kendall_tau([1.0, 2.0], [1.0])
