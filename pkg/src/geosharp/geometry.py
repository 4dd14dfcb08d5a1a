"""Quotient geometry of factor pairs ``(G, H)`` under the GL(h) action.

The action is ``ψ(A, (G, H)) = (G A⁻¹, H Aᵀ)``, which leaves ``G Hᵀ`` fixed.
All arrays may carry leading batch dimensions: a diagonal network is stored as
``d`` independent 1×1 pairs of shape ``(d, 1, 1)`` and every operation acts on
each pair separately (inner products sum over the batch).

Three metrics are provided:

* ``euclidean``: ``Tr(ξ_Gᵀζ_G + ξ_Hᵀζ_H)``
* ``inv``: ``Tr(P⁻¹ξ_Gᵀζ_G + Q⁻¹ξ_Hᵀζ_H)``
* ``mix``: ``Tr(Q ξ_Gᵀζ_G + P ξ_Hᵀζ_H)``

with Gram matrices ``P = GᵀG + εI`` and ``Q = HᵀH + εI``. An optional constant
``scale`` multiplies the metric; it changes gradients and Hessians by ``1/scale``
but leaves horizontal spaces and geodesics alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import solve_sylvester

__all__ = [
    "FactorPair",
    "TangentPair",
    "MetricKind",
    "OrbitCurve",
    "SingularGramError",
    "NotHorizontalError",
    "UnsupportedMetricError",
    "MixDomainError",
    "EUCLIDEAN",
    "INV",
    "MIX",
    "grams",
    "group_action",
    "orbit_point",
    "metric_inner",
    "metric_norm",
    "vertical_generator",
    "horizontality_residual",
    "project_horizontal",
    "riemannian_gradient",
    "christoffel_quadratic",
    "geodesic_acceleration",
    "geodesic_step",
    "exact_geodesic_diagonal",
    "riemannian_hvp",
]

GRAM_MAX_COND = 1e12
HORIZONTAL_TOL = 1e-6


class SingularGramError(np.linalg.LinAlgError):
    """A Gram matrix is not invertible (after relaxation)."""


class NotHorizontalError(ValueError):
    """A tangent expected to be horizontal is not."""


class UnsupportedMetricError(ValueError):
    """The requested operation is not defined for this metric."""


class MixDomainError(ValueError):
    """An exact Mix geodesic left its domain ``1 + 2Bt > 0``."""


def _t(M):
    return np.swapaxes(M, -1, -2)


def _sym(M):
    return 0.5 * (M + _t(M))


@dataclass(frozen=True)
class FactorPair:
    """Point ``(G, H)`` of the total space; shapes ``(..., n, h)`` and ``(..., m, h)``."""

    G: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if G.ndim < 2 or H.ndim < 2:
            raise ValueError("factors must be at least two-dimensional")
        if G.shape[-1] != H.shape[-1] or G.shape[:-2] != H.shape[:-2]:
            raise ValueError(f"incompatible factor shapes {G.shape} and {H.shape}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "H", H)

    @property
    def h(self):
        return self.G.shape[-1]

    def product(self):
        """The symmetry-invariant product ``G Hᵀ``."""
        return self.G @ _t(self.H)

    def flat(self):
        return np.concatenate([self.G.ravel(), self.H.ravel()])

    def __add__(self, other: "TangentPair") -> "FactorPair":
        return FactorPair(self.G + other.xi_G, self.H + other.xi_H)


@dataclass(frozen=True)
class TangentPair:
    """Tangent vector ``(ξ_G, ξ_H)``, shaped like its base point."""

    xi_G: np.ndarray
    xi_H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi_G", np.asarray(self.xi_G, dtype=float))
        object.__setattr__(self, "xi_H", np.asarray(self.xi_H, dtype=float))

    @classmethod
    def zeros_like(cls, point: FactorPair):
        return cls(np.zeros_like(point.G), np.zeros_like(point.H))

    @classmethod
    def from_flat(cls, vec, point: FactorPair):
        vec = np.asarray(vec, dtype=float)
        k = point.G.size
        if vec.size != k + point.H.size:
            raise ValueError(f"flat vector of size {vec.size} does not match the point")
        return cls(vec[:k].reshape(point.G.shape), vec[k:].reshape(point.H.shape))

    def flat(self):
        return np.concatenate([self.xi_G.ravel(), self.xi_H.ravel()])

    def __add__(self, other):
        return TangentPair(self.xi_G + other.xi_G, self.xi_H + other.xi_H)

    def __sub__(self, other):
        return TangentPair(self.xi_G - other.xi_G, self.xi_H - other.xi_H)

    def __mul__(self, a):
        return TangentPair(a * self.xi_G, a * self.xi_H)

    __rmul__ = __mul__

    def __neg__(self):
        return TangentPair(-self.xi_G, -self.xi_H)


@dataclass(frozen=True)
class MetricKind:
    """Which metric is in force, with Gram relaxation ``epsilon`` and constant ``scale``."""

    kind: str = "inv"
    epsilon: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in ("euclidean", "inv", "mix"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "kind", kind)


EUCLIDEAN = MetricKind("euclidean")
INV = MetricKind("inv")
MIX = MetricKind("mix")


@dataclass(frozen=True)
class OrbitCurve:
    """The curve ``α ↦ ψ(αA, base)`` through the orbit of ``base``."""

    base: FactorPair
    A: np.ndarray


def _as_metric(kind) -> MetricKind:
    if isinstance(kind, MetricKind):
        return kind
    return MetricKind(kind)


def grams(point: FactorPair, epsilon=0.0):
    """Relaxed Gram matrices ``(GᵀG + εI, HᵀH + εI)``."""
    eye = np.eye(point.h)
    P = _t(point.G) @ point.G + epsilon * eye
    Q = _t(point.H) @ point.H + epsilon * eye
    return P, Q


def _inverse(M):
    if M.shape[-1] == 1:
        # 1×1 blocks (diagonal networks): invertible iff the entry is nonzero
        if np.any(np.abs(M) <= 1e-300) or not np.all(np.isfinite(M)):
            raise SingularGramError("Gram matrix is singular (zero entry)")
        return 1.0 / M
    cond = np.linalg.cond(M)
    if np.any(~np.isfinite(cond)) or np.any(cond > GRAM_MAX_COND):
        raise SingularGramError(f"Gram matrix is singular (condition {np.max(cond):.3g})")
    return np.linalg.inv(M)


def _inv_grams(point, metric):
    P, Q = grams(point, metric.epsilon)
    return P, Q, _inverse(P), _inverse(Q)


def group_action(point: FactorPair, A) -> FactorPair:
    """``(G A⁻¹, H Aᵀ)``."""
    A = np.asarray(A, dtype=float)
    if A.shape[-2:] != (point.h, point.h):
        raise ValueError(f"group element must be {point.h}×{point.h}")
    cond = np.linalg.cond(A)
    if np.any(~np.isfinite(cond)) or np.any(cond > GRAM_MAX_COND):
        raise np.linalg.LinAlgError("group element is singular")
    return FactorPair(point.G @ np.linalg.inv(A), point.H @ _t(A))


def orbit_point(curve: OrbitCurve, alpha) -> FactorPair:
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    return group_action(curve.base, alpha * np.asarray(curve.A, dtype=float))


def metric_inner(kind, point: FactorPair, xi: TangentPair, zeta: TangentPair) -> float:
    m = _as_metric(kind)
    if m.kind == "euclidean":
        val = np.sum(xi.xi_G * zeta.xi_G) + np.sum(xi.xi_H * zeta.xi_H)
    elif m.kind == "inv":
        _, _, Pi, Qi = _inv_grams(point, m)
        val = np.sum((xi.xi_G @ Pi) * zeta.xi_G) + np.sum((xi.xi_H @ Qi) * zeta.xi_H)
    else:
        P, Q = grams(point, m.epsilon)
        _inverse(P), _inverse(Q)
        val = np.sum((xi.xi_G @ Q) * zeta.xi_G) + np.sum((xi.xi_H @ P) * zeta.xi_H)
    return float(m.scale * val)


def metric_norm(kind, point, xi) -> float:
    return float(np.sqrt(max(metric_inner(kind, point, xi, xi), 0.0)))


def vertical_generator(point: FactorPair, E) -> TangentPair:
    """Velocity of ``t ↦ ψ(exp(tE), point)`` at ``t = 0``: ``(−G E, H Eᵀ)``."""
    E = np.asarray(E, dtype=float)
    return TangentPair(-point.G @ E, point.H @ _t(E))


def _horizontal_sides(m, point, xi, P, Q):
    G, H = point.G, point.H
    if m.kind == "euclidean":
        return _t(G) @ xi.xi_G, _t(xi.xi_H) @ H
    if m.kind == "inv":
        return _t(xi.xi_G) @ G @ Q, P @ _t(H) @ xi.xi_H
    return _t(G) @ xi.xi_G @ Q, P @ _t(xi.xi_H) @ H


def horizontality_residual(kind, point: FactorPair, xi: TangentPair) -> float:
    """Frobenius norm of the defect in the metric's horizontality condition.

    Inv: ``ξ_GᵀG Q = P Hᵀξ_H``; Mix: ``Gᵀξ_G Q = P ξ_HᵀH``; Euclidean:
    ``Gᵀξ_G = ξ_HᵀH``.
    """
    m = _as_metric(kind)
    P, Q = grams(point, m.epsilon)
    lhs, rhs = _horizontal_sides(m, point, xi, P, Q)
    return float(np.linalg.norm((lhs - rhs).ravel()))


def project_horizontal(kind, point: FactorPair, xi: TangentPair) -> TangentPair:
    """Metric-orthogonal projection onto the horizontal space.

    The result is ``(ξ_G + GΛ, ξ_H − HΛᵀ)`` with Λ chosen so that the
    horizontality condition holds. For Inv, ``X = Λᵀ`` solves the Sylvester
    equation ``A X + X A = B`` with ``A = P Q`` and ``B = P Hᵀξ_H − ξ_GᵀG Q``.
    For Mix, ``Λ = ½(ξ_HᵀH Q⁻¹ − P⁻¹Gᵀξ_G)``. For Euclidean, ``P Λ + Λ Q = ξ_HᵀH − Gᵀξ_G``.
    """
    m = _as_metric(kind)
    G, H = point.G, point.H
    if m.kind == "euclidean":
        P, Q = grams(point, m.epsilon)
        lam = solve_sylvester(P, Q, _t(xi.xi_H) @ H - _t(G) @ xi.xi_G)
    elif m.kind == "inv":
        P, Q, _, _ = _inv_grams(point, m)
        A = P @ Q
        B = P @ _t(H) @ xi.xi_H - _t(xi.xi_G) @ G @ Q
        lam = _t(solve_sylvester(A, A, B))
    else:
        _, _, Pi, Qi = _inv_grams(point, m)
        lam = 0.5 * (_t(xi.xi_H) @ H @ Qi - Pi @ _t(G) @ xi.xi_G)
    return TangentPair(xi.xi_G + G @ lam, xi.xi_H - H @ _t(lam))


def riemannian_gradient(kind, point: FactorPair, euclid_grad: TangentPair) -> TangentPair:
    """Metric gradient: the tangent ``g`` with ``⟨g, ξ⟩_metric = ⟨∂ℓ, ξ⟩`` for all ξ.

    Inv: ``(∂_G P, ∂_H Q)``; Mix: ``(∂_G Q⁻¹, ∂_H P⁻¹)``; both divided by the scale.
    """
    m = _as_metric(kind)
    if m.kind == "euclidean":
        out = euclid_grad
    elif m.kind == "inv":
        P, Q, _, _ = _inv_grams(point, m)
        out = TangentPair(euclid_grad.xi_G @ P, euclid_grad.xi_H @ Q)
    else:
        _, _, Pi, Qi = _inv_grams(point, m)
        out = TangentPair(euclid_grad.xi_G @ Qi, euclid_grad.xi_H @ Pi)
    return out * (1.0 / m.scale)


def _check_horizontal(m, point, xi, tol):
    res = horizontality_residual(m, point, xi)
    P, Q = grams(point, m.epsilon)
    lhs, rhs = _horizontal_sides(m, point, xi, P, Q)
    ref = max(1.0, float(np.linalg.norm(lhs.ravel()) + np.linalg.norm(rhs.ravel())))
    if res > tol * ref:
        raise NotHorizontalError(f"tangent is not horizontal (residual {res:.3g})")


def christoffel_quadratic(kind, point: FactorPair, xi: TangentPair, check=True,
                          tol=HORIZONTAL_TOL) -> TangentPair:
    """Christoffel quadratic form ``Γ(ξ, ξ)`` for a horizontal ``ξ``.

    Inv (per factor, with its own Gram ``P``)::

        −ξ_G P⁻¹ (ξ_GᵀG + Gᵀξ_G) + G P⁻¹ ξ_Gᵀξ_G

    Mix (factors coupled through the other Gram)::

        ξ_G (ξ_HᵀH + Hᵀξ_H) Q⁻¹ − G (ξ_Hᵀξ_H) Q⁻¹
    """
    m = _as_metric(kind)
    if m.kind == "euclidean":
        return TangentPair.zeros_like(point)
    if check:
        _check_horizontal(m, point, xi, tol)
    G, H, xG, xH = point.G, point.H, xi.xi_G, xi.xi_H
    _, _, Pi, Qi = _inv_grams(point, m)
    if m.kind == "inv":
        gG = -xG @ Pi @ (_t(xG) @ G + _t(G) @ xG) + G @ Pi @ (_t(xG) @ xG)
        gH = -xH @ Qi @ (_t(xH) @ H + _t(H) @ xH) + H @ Qi @ (_t(xH) @ xH)
    else:
        gG = xG @ (_t(xH) @ H + _t(H) @ xH) @ Qi - G @ (_t(xH) @ xH) @ Qi
        gH = xH @ (_t(xG) @ G + _t(G) @ xG) @ Pi - H @ (_t(xG) @ xG) @ Pi
    return TangentPair(gG, gH)


def geodesic_acceleration(kind, point, xi, check=True) -> TangentPair:
    """Second time derivative of the geodesic at ``t = 0``: ``−Γ(ξ, ξ)``."""
    return -christoffel_quadratic(kind, point, xi, check=check)


def geodesic_step(kind, point: FactorPair, xi: TangentPair, t=1.0, check=True) -> FactorPair:
    """Second-order geodesic ``x + ξt + ½ a t²`` with ``a = −Γ(ξ, ξ)``."""
    if t == 0:
        return point
    acc = geodesic_acceleration(kind, point, xi, check=check)
    return FactorPair(point.G + t * xi.xi_G + (0.5 * t * t) * acc.xi_G,
                      point.H + t * xi.xi_H + (0.5 * t * t) * acc.xi_H)


def exact_factor_curve(kind, B, t=1.0):
    """Multiplicative factor of an exact diagonal geodesic: ``e^{Bt}`` or ``√(1 + 2Bt)``."""
    m = _as_metric(kind)
    B = np.asarray(B, dtype=float)
    if m.kind == "inv":
        return np.exp(B * t)
    if m.kind == "mix":
        arg = 1.0 + 2.0 * B * t
        if np.any(arg <= 0):
            raise MixDomainError("Mix geodesic requires 1 + 2Bt > 0 in every coordinate")
        return np.sqrt(arg)
    raise UnsupportedMetricError("exact diagonal geodesics exist for inv and mix only")


def exact_geodesic_diagonal(kind, u0, v0, B, t=1.0):
    """Exact geodesic of a diagonal network from ``(u0, v0)`` with horizontal rate ``B``.

    The horizontal direction is ``(B⊙u0, B⊙v0)``. Returns ``(u(t), v(t))``.
    """
    f = exact_factor_curve(kind, B, t)
    return np.asarray(u0, dtype=float) * f, np.asarray(v0, dtype=float) * f


def riemannian_hvp(point: FactorPair, xi: TangentPair, euclid_hvp, euclid_grad: TangentPair,
                   metric=INV) -> TangentPair:
    """Lifted Riemannian Hessian-vector product under the Inv metric.

    ``euclid_hvp`` maps a TangentPair to the Euclidean Hessian applied to it and
    ``euclid_grad`` is the Euclidean gradient at ``point``. Per factor::

        (∇²ℓ ξ)_G P + 2 ∂_G sym(Gᵀξ_G) − ξ_G P⁻¹ sym(Gᵀ∂̃_G)
            − ∂_G sym(Gᵀξ_G) + G P⁻¹ sym(ξ_Gᵀ∂̃_G)

    where ``∂̃_G = ∂_G P`` is the Riemannian gradient; the sum is then projected
    onto the horizontal space.
    """
    m = _as_metric(metric)
    if m.kind != "inv":
        raise UnsupportedMetricError(f"riemannian_hvp is defined for the inv metric only, got {m.kind}")
    P, Q, Pi, Qi = _inv_grams(point, m)
    hv = euclid_hvp(xi)

    def one(F, xF, hF, gF, S, Si):
        rg = gF @ S
        sx = _sym(_t(F) @ xF)
        return (hF @ S + 2.0 * gF @ sx - xF @ Si @ _sym(_t(F) @ rg)
                - gF @ sx + F @ Si @ _sym(_t(xF) @ rg))

    out = TangentPair(one(point.G, xi.xi_G, hv.xi_G, euclid_grad.xi_G, P, Pi),
                      one(point.H, xi.xi_H, hv.xi_H, euclid_grad.xi_H, Q, Qi))
    return project_horizontal(m, point, out) * (1.0 / m.scale)
