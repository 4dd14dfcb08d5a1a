"""Exact and stochastic traces of matrix-free operators.

Operators are only touched through ``apply``. :class:`LinearOperator` counts
its calls, so the reported matrix-vector-product budget can be checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import FactorPair, OrbitCurve, TangentPair, orbit_point, riemannian_hvp
from .models import (
    ClassificationBatch, MatrixNetParams, matrixnet_flat, matrixnet_from_flat, matrixnet_grad,
    matrixnet_hvp, matrixnet_to_pair, pair_to_matrixnet,
)
from .numerics import SeededRng, _as_rng, sample_rademacher, thin_qr

__all__ = [
    "LinearOperator", "TraceEstimate", "Spectrum",
    "exact_trace", "hutchinson", "hutchpp", "relative_error", "matrixnet_operators",
    "orbit_trace_sweep", "operator_spectrum",
]


class LinearOperator:
    """A ``dim``-dimensional linear map given by ``apply``; counts applications."""

    def __init__(self, dim, apply):
        if dim < 1:
            raise ValueError("operator dimension must be positive")
        self.dim = int(dim)
        self._apply = apply
        self.count = 0

    def apply(self, x):
        self.count += 1
        return np.asarray(self._apply(np.asarray(x, dtype=float)), dtype=float)

    __matmul__ = apply

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("need a square matrix")
        return cls(M.shape[0], lambda x: M @ x)


@dataclass
class TraceEstimate:
    """``mean`` of per-probe values with their sample ``std``.

    ``mean_std = std / √n_probes`` is the standard error of the mean. For
    Hutch++, ``mean`` includes the exact low-rank part and the probe values are
    those of the deflated remainder. ``running[m − 1]`` is the estimate available
    after ``m`` products (NaN while the Hutch++ sketch is still being built).
    """

    mean: float
    std: float
    n_probes: int
    mvp_count: int
    mean_std: float = 0.0
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    running: np.ndarray = field(default_factory=lambda: np.zeros(0))


def exact_trace(op: LinearOperator) -> float:
    """``Σᵢ eᵢᵀ op(eᵢ)`` with one product per unit vector."""
    total = 0.0
    e = np.zeros(op.dim)
    for i in range(op.dim):
        e[i] = 1.0
        total += float(op.apply(e)[i])
        e[i] = 0.0
    return total


def _summarize(values, offset, mvp_count, running):
    values = np.asarray(values, dtype=float)
    n = values.size
    # identical samples give exactly zero spread (np.std can leave rounding noise)
    std = float(np.std(values, ddof=1)) if n > 1 and np.ptp(values) > 0 else 0.0
    return TraceEstimate(
        mean=float(offset + np.mean(values)),
        std=std,
        n_probes=n,
        mvp_count=int(mvp_count),
        mean_std=std / np.sqrt(n),
        samples=values,
        running=np.asarray(running, dtype=float),
    )


def hutchinson(op: LinearOperator, budget, rng) -> TraceEstimate:
    """Mean of ``xᵀ op(x)`` over ``budget`` Rademacher probes."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    vals = np.empty(budget)
    for j in range(budget):
        x = sample_rademacher(op.dim, rng)
        vals[j] = x @ op.apply(x)
    running = np.cumsum(vals) / np.arange(1, budget + 1)
    return _summarize(vals, 0.0, budget, running)


def hutchpp(op: LinearOperator, k, budget, rng) -> TraceEstimate:
    """Hutch++: exact trace on a sketched range plus Hutchinson on the remainder.

    ``S`` is a ``D×k`` Rademacher sketch, ``Q = thin_qr(op S)``; the estimate is
    ``Tr(Qᵀ op Q)`` plus Hutchinson with ``budget − 2k`` probes on
    ``x ↦ (I − QQᵀ) op((I − QQᵀ) x)``. With ``k = 0`` this is exactly
    :func:`hutchinson` on the same stream.
    """
    D = op.dim
    if k < 0 or k > D:
        raise ValueError(f"sketch size must lie in [0, {D}]")
    if budget < 2 * k + 1:
        raise ValueError(f"budget {budget} is too small for sketch size {k} (need ≥ {2 * k + 1})")
    g = _as_rng(rng)
    if k > 0:
        S = 2.0 * g.integers(0, 2, size=(D, k)).astype(float) - 1.0
        Y = np.column_stack([op.apply(S[:, j]) for j in range(k)])
        Q = thin_qr(Y)
        exact_part = float(sum(Q[:, j] @ op.apply(Q[:, j]) for j in range(k)))
    else:
        Q = np.zeros((D, 0))
        exact_part = 0.0
    m = budget - 2 * k
    vals = np.empty(m)
    for j in range(m):
        x = sample_rademacher(D, g)
        x = x - Q @ (Q.T @ x)
        y = op.apply(x)
        y = y - Q @ (Q.T @ y)
        vals[j] = x @ y
    running = np.full(budget, np.nan)
    running[2 * k:] = exact_part + np.cumsum(vals) / np.arange(1, m + 1)
    if k > 0:
        running[2 * k - 1] = exact_part
    return _summarize(vals, exact_part, budget, running)


def relative_error(exact, estimate) -> float:
    """``|T − T̂| / |T|``."""
    if exact == 0:
        raise ZeroDivisionError("relative error is undefined for a zero exact trace")
    return float(abs(exact - estimate) / abs(exact))


def matrixnet_operators(params: MatrixNetParams, batch: ClassificationBatch):
    """Euclidean and Riemannian (Inv) Hessians of the matrix net as flat operators.

    Both act on ``(vec W1, vec W2)`` (column stacking). The Riemannian one maps
    a direction to the corrected, horizontally projected Hessian product.
    """
    h, D_in = params.W1.shape
    D_out = params.W2.shape[0]
    dim = h * D_in + D_out * h
    pair = matrixnet_to_pair(params)
    gW1, gW2 = matrixnet_grad(params, batch)
    egrad = TangentPair(gW2, gW1.T)

    def euclid(x):
        V1, V2 = matrixnet_from_flat(x, h, D_in, D_out)
        H1, H2 = matrixnet_hvp(params, batch, (V1, V2))
        return matrixnet_flat(H1, H2)

    def pair_hvp(t: TangentPair):
        H1, H2 = matrixnet_hvp(params, batch, (t.xi_H.T, t.xi_G))
        return TangentPair(H2, H1.T)

    def riem(x):
        V1, V2 = matrixnet_from_flat(x, h, D_in, D_out)
        out = riemannian_hvp(pair, TangentPair(V2, V1.T), pair_hvp, egrad)
        return matrixnet_flat(out.xi_H.T, out.xi_G)

    return LinearOperator(dim, euclid), LinearOperator(dim, riem)


_ESTIMATORS = ("hutchinson", "hutchpp")


def orbit_trace_sweep(params: MatrixNetParams, batch: ClassificationBatch, A, alpha_grid,
                      estimators=_ESTIMATORS, budget=100, k=20, rng=None):
    """Exact and estimated Hessian traces along ``α ↦ ψ(αA, θ)``.

    Returns one row per ``(alpha, operator, estimator)``; the ``exact`` column
    is repeated on every row. Each cell draws from its own derived stream.
    """
    rng = SeededRng(0) if rng is None else rng
    curve = OrbitCurve(matrixnet_to_pair(params), np.asarray(A, dtype=float))
    rows = []
    for ia, alpha in enumerate(alpha_grid):
        p = pair_to_matrixnet(orbit_point(curve, alpha))
        ops = dict(zip(("euclidean", "riemannian"), matrixnet_operators(p, batch)))
        for io, (name, op) in enumerate(ops.items()):
            exact = exact_trace(op)
            rows.append(dict(alpha=float(alpha), operator=name, estimator="exact", mean=exact,
                             std=0.0, mean_std=0.0, exact=exact, mvp_count=op.dim))
            for ie, est in enumerate(estimators):
                sub = rng.derive(ia).derive(io).derive(ie)
                if est == "hutchinson":
                    r = hutchinson(op, budget, sub)
                elif est == "hutchpp":
                    r = hutchpp(op, k, budget, sub)
                else:
                    raise ValueError(f"unknown estimator {est!r}")
                rows.append(dict(alpha=float(alpha), operator=name, estimator=est, mean=r.mean,
                                 std=r.std, mean_std=r.mean_std, exact=exact,
                                 mvp_count=r.mvp_count))
    return rows


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    max_imag: float


def operator_spectrum(op: LinearOperator) -> Spectrum:
    """Eigenvalues (real parts, ascending) of the operator materialized column by column."""
    M = np.column_stack([op.apply(e) for e in np.eye(op.dim)])
    try:
        w = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(w.real, kind="stable")
    return Spectrum(w.real[order], float(np.max(np.abs(w.imag), initial=0.0)))
