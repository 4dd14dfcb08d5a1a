import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff
from geosharp.geometry import OrbitCurve, orbit_point
from geosharp.models import (
    MatrixNetParams, generate_classification_batch, matrixnet_flat, matrixnet_from_flat,
    matrixnet_grad, matrixnet_to_pair, pair_to_matrixnet,
)
from geosharp.numerics import SeededRng, sample_gl_matrix
from geosharp.trace import (
    LinearOperator, exact_trace, hutchinson, hutchpp, matrixnet_operators, operator_spectrum,
    orbit_trace_sweep, relative_error,
)

seeds = st.integers(0, 2**32 - 1)


def _sym(g, D):
    M = g.standard_normal((D, D))
    return M + M.T


def test_exact_trace_and_counting(gen):
    M = gen.standard_normal((7, 7))
    op = LinearOperator.from_matrix(M)
    assert exact_trace(op) == pytest.approx(np.trace(M))
    assert op.count == 7


def test_operator_validation():
    with pytest.raises(ValueError):
        LinearOperator(0, lambda x: x)
    with pytest.raises(ValueError):
        LinearOperator.from_matrix(np.zeros((2, 3)))


@given(D=st.integers(1, 30), seed=seeds)
def test_hutchinson_exact_on_diagonal(D, seed):
    g = np.random.default_rng(seed)
    d = g.standard_normal(D)
    r = hutchinson(LinearOperator.from_matrix(np.diag(d)), 10, SeededRng(seed))
    assert r.std == 0.0
    assert r.mean == pytest.approx(d.sum(), abs=1e-12)
    assert r.mvp_count == 10 and r.n_probes == 10


def test_hutchinson_unbiased_and_std(gen):
    M = _sym(gen, 12)
    r = hutchinson(LinearOperator.from_matrix(M), 20000, SeededRng(0))
    # variance of xᵀMx for Rademacher x is 2(‖M‖_F² − Σ M_ii²)
    sd = np.sqrt(2 * (np.sum(M**2) - np.sum(np.diag(M) ** 2)))
    assert abs(r.mean - np.trace(M)) <= 5 * sd / np.sqrt(20000)
    assert r.std == pytest.approx(sd, rel=0.05)
    assert r.mean_std == pytest.approx(r.std / np.sqrt(20000))
    np.testing.assert_allclose(r.running[-1], r.mean)


@given(D=st.integers(3, 25), seed=seeds, data=st.data())
@settings(max_examples=25)
def test_hutchpp_exact_on_low_rank(D, seed, data):
    k = data.draw(st.integers(1, D))
    rank = data.draw(st.integers(0, k))
    g = np.random.default_rng(seed)
    U = g.standard_normal((D, rank))
    M = U @ np.diag(g.standard_normal(rank)) @ U.T
    r = hutchpp(LinearOperator.from_matrix(M), k, 2 * k + 3, SeededRng(seed))
    assert abs(r.mean - np.trace(M)) <= 1e-8 * max(1.0, np.abs(M).sum())
    assert r.mvp_count == 2 * k + 3


def test_hutchpp_k0_equals_hutchinson(gen):
    op = LinearOperator.from_matrix(_sym(gen, 9))
    a = hutchpp(op, 0, 25, SeededRng(3))
    b = hutchinson(op, 25, SeededRng(3))
    assert a.mean == b.mean
    np.testing.assert_array_equal(a.running, b.running)


def test_hutchpp_budget_accounting(gen):
    op = LinearOperator.from_matrix(_sym(gen, 30))
    r = hutchpp(op, 5, 40, SeededRng(0))
    assert op.count == 40 == r.mvp_count
    assert r.n_probes == 30
    assert r.running.shape == (40,)
    assert np.all(np.isnan(r.running[:9])) and np.all(np.isfinite(r.running[9:]))
    with pytest.raises(ValueError):
        hutchpp(op, 5, 10, SeededRng(0))
    with pytest.raises(ValueError):
        hutchpp(op, 31, 100, SeededRng(0))
    with pytest.raises(ValueError):
        hutchinson(op, 0, SeededRng(0))


def test_hutchpp_beats_hutchinson_on_decaying_spectrum():
    g = np.random.default_rng(1)
    Q, _ = np.linalg.qr(g.standard_normal((60, 60)))
    M = (Q * (1.0 / np.arange(1, 61) ** 2)) @ Q.T
    op = LinearOperator.from_matrix(M)
    T = np.trace(M)
    e1 = np.median([relative_error(T, hutchinson(op, 60, SeededRng(s)).mean) for s in range(10)])
    e2 = np.median([relative_error(T, hutchpp(op, 10, 60, SeededRng(s)).mean) for s in range(10)])
    assert e2 < e1 / 3


def test_relative_error():
    assert relative_error(2.0, 1.5) == 0.25
    with pytest.raises(ZeroDivisionError):
        relative_error(0.0, 1.0)


# ------------------------------------------------------------- matrix net

def _net(seed=0, h=2, D_in=6, D_out=3, N=24):
    r = SeededRng(seed)
    batch = generate_classification_batch(N, D_in, D_out, r.derive(0))
    g = r.derive(1).generator
    return batch, MatrixNetParams(g.standard_normal((h, D_in)) / np.sqrt(D_in), g.standard_normal((D_out, h)))


def test_euclidean_operator_is_fd_hessian():
    batch, p = _net()
    h, D_in = p.W1.shape
    D_out = p.W2.shape[0]
    eop, _ = matrixnet_operators(p, batch)
    M = np.column_stack([eop.apply(e) for e in np.eye(eop.dim)])
    grad = lambda w: matrixnet_flat(*matrixnet_grad(MatrixNetParams(*matrixnet_from_flat(w, h, D_in, D_out)), batch))  # noqa: E731
    np.testing.assert_allclose(M, central_diff(grad, matrixnet_flat(p.W1, p.W2)), rtol=1e-5, atol=1e-8)


def test_riemannian_trace_constant_on_orbit():
    batch, p = _net()
    curve = OrbitCurve(matrixnet_to_pair(p), sample_gl_matrix(2, SeededRng(4)))
    rt, et = [], []
    for a in (0.1, 0.5, 1.0, 2.0, 10.0):
        e, r = matrixnet_operators(pair_to_matrixnet(orbit_point(curve, a)), batch)
        et.append(exact_trace(e))
        rt.append(exact_trace(r))
    rt, et = np.array(rt), np.array(et)
    r_range = (rt.max() - rt.min()) / abs(rt.mean())
    e_range = (et.max() - et.min()) / abs(et.mean())
    assert r_range <= 1e-6
    assert e_range >= 10 * r_range


def test_riemannian_spectrum_real_and_orbit_invariant():
    batch, p = _net()
    curve = OrbitCurve(matrixnet_to_pair(p), sample_gl_matrix(2, SeededRng(4)))
    specs = [operator_spectrum(matrixnet_operators(pair_to_matrixnet(orbit_point(curve, a)), batch)[1])
             for a in (0.5, 3.0)]
    for s in specs:
        assert s.max_imag <= 1e-8 * np.abs(s.eigenvalues).max()
    np.testing.assert_allclose(specs[0].eigenvalues, specs[1].eigenvalues, atol=1e-8)


def test_orbit_trace_sweep_rows_and_determinism():
    batch, p = _net()
    A = sample_gl_matrix(2, SeededRng(4))
    rows = orbit_trace_sweep(p, batch, A, [0.5, 2.0], budget=30, k=5, rng=SeededRng(9))
    assert len(rows) == 2 * 2 * 3
    assert {r["estimator"] for r in rows} == {"exact", "hutchinson", "hutchpp"}
    assert all(r["mvp_count"] == 30 for r in rows if r["estimator"] != "exact")
    again = orbit_trace_sweep(p, batch, A, [0.5, 2.0], budget=30, k=5, rng=SeededRng(9))
    assert rows == again
