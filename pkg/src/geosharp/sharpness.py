"""Worst-case sharpness measures and their closed forms.

Both adaptive and geodesic sharpness are maximized with the same Auto-PGD
engine. A problem hands the engine a small set of callbacks (objective,
gradient with respect to the perturbation, metric gradient, metric norm,
feasible-set projection, random start); everything else is shared.

For diagonal networks the Inv and Mix metrics are diagonal in ``(u, v)``, so
they are represented as elementwise weights ``‖ξ / c‖`` with ``c = |w|`` (Inv)
or ``c = (1/|v|, 1/|u|)`` (Mix). Adaptive sharpness with ``c = |w|`` is then
literally the same computation as Inv geodesic sharpness with linear
perturbations and no horizontal projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .geometry import (
    INV, FactorPair, MetricKind, MixDomainError, TangentPair, _as_metric, christoffel_quadratic, grams,
    metric_inner, metric_norm, project_horizontal, riemannian_gradient,
)
from .models import (
    DiagonalParams, DivergenceError, MatrixNetParams, RegressionData, ScalarParams,
    ClassificationBatch, diagonal_grad, diagonal_loss, matrixnet_grad, matrixnet_loss,
    matrixnet_to_pair, pair_to_matrixnet,
)
from .numerics import SeededRng, _as_rng

__all__ = [
    "CHECKPOINTS", "SharpnessConfig", "SharpnessResult",
    "DiagonalObjective", "ScalarObjective", "MatrixNetObjective",
    "adaptive_sharpness_worst", "geodesic_sharpness_worst", "batch_mean_sharpness",
    "diagonal_sharpness_closed_form", "scalar_sharpness_closed_form", "group_norm",
    "auto_pgd",
]

CHECKPOINTS = (0.22, 0.37, 0.49, 0.59, 0.67, 0.74, 0.79, 0.84, 0.88, 0.92, 0.95, 0.98)
MIX_MIN_RATE = -0.5 * (1.0 - 1e-9)


@dataclass(frozen=True)
class SharpnessConfig:
    """Auto-PGD settings and the geometry used for the perturbation.

    ``geodesic`` picks the perturbation map: ``exact`` (closed-form geodesics,
    diagonal and scalar models only), ``second_order`` (``x + ξ − ½Γ(ξ, ξ)``)
    or ``linear`` (``x + ξ``). ``horizontal`` toggles projection onto the
    horizontal space.
    """

    rho: float = 0.1
    n_iter: int = 100
    metric: MetricKind = INV
    eta0: float | None = None
    momentum: float = 0.75
    checkpoint_fractions: tuple = CHECKPOINTS
    restarts: int = 3
    geodesic: str = "exact"
    horizontal: bool = True
    init: str = "sphere"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.n_iter < 0 or self.restarts < 1:
            raise ValueError("n_iter must be ≥ 0 and restarts ≥ 1")
        fr = np.asarray(self.checkpoint_fractions, dtype=float)
        if fr.size and (np.any(fr <= 0) or np.any(fr >= 1) or np.any(np.diff(fr) <= 0)):
            raise ValueError("checkpoint fractions must be strictly increasing in (0, 1)")
        if self.geodesic not in ("exact", "second_order", "linear"):
            raise ValueError(f"unknown geodesic mode {self.geodesic!r}")
        if self.init not in ("sphere", "zero"):
            raise ValueError(f"unknown init {self.init!r}")
        object.__setattr__(self, "metric", _as_metric(self.metric))
        object.__setattr__(self, "checkpoint_fractions", tuple(float(f) for f in fr))

    @property
    def step0(self):
        return self.rho / 4.0 if self.eta0 is None else self.eta0


@dataclass
class SharpnessResult:
    value: float
    argmax_direction: np.ndarray
    iterations_used: int
    best_iteration: int
    restart_values: list = field(default_factory=list)


# ------------------------------------------------------------------ engine

def auto_pgd(problem, config: SharpnessConfig, rng):
    """Maximize ``problem.objective`` over the feasible set with Auto-PGD.

    Steps are ``η · d / ‖d‖`` with ``d`` the metric gradient. The step size is
    halved at a checkpoint when fewer than 75% of the steps since the previous
    checkpoint increased the objective, or when neither the step size nor the
    best value changed; the iterate then restarts from the best point.
    Returns ``(best value, best ξ, best iteration)``; the zero perturbation
    (value 0) is always a candidate.
    """
    n_iter = config.n_iter
    alpha = config.momentum
    checkpoints = sorted({int(np.ceil(p * n_iter)) for p in config.checkpoint_fractions} - {0})

    def value(xi):
        f = problem.objective(xi)
        if not np.isfinite(f):
            raise DivergenceError("non-finite loss during sharpness ascent")
        return f

    def step(xi, eta):
        d = problem.ascent_direction(xi, problem.gradient(xi))
        nd = problem.norm(d)
        if nd == 0 or not np.isfinite(nd):
            return xi
        return problem.project(xi + (eta / nd) * d)

    best_xi = problem.zero()
    best_f = 0.0
    best_it = 0
    if config.init == "zero" or n_iter == 0:
        x = problem.zero()
    else:
        x = problem.project(problem.sample(rng))
    if n_iter == 0:
        return best_f, best_xi, best_it

    fx = value(x)
    if fx > best_f:
        best_f, best_xi, best_it = fx, x, 0
    eta = config.step0
    x_prev = x
    x = step(x, eta)
    fx_prev, fx = fx, value(x)
    if fx > best_f:
        best_f, best_xi, best_it = fx, x, 1
    n_up = int(fx > fx_prev)
    last_cp, eta_at_cp, best_at_cp = 0, eta, best_f

    for k in range(1, n_iter):
        z = step(x, eta)
        x_new = problem.project(x + alpha * (z - x) + (1.0 - alpha) * (x - x_prev))
        f_new = value(x_new)
        n_up += int(f_new > fx)
        x_prev, x, fx = x, x_new, f_new
        if fx > best_f:
            best_f, best_xi, best_it = fx, x, k + 1
        if k in checkpoints:
            cond1 = n_up < 0.75 * (k - last_cp)
            cond2 = eta_at_cp == eta and best_at_cp == best_f
            eta_at_cp, best_at_cp = eta, best_f
            if cond1 or cond2:
                eta *= 0.5
                x = x_prev = best_xi
                fx = best_f
            last_cp, n_up = k, 0
    return best_f, best_xi, best_it


def _run_restarts(problem, config, rng):
    base = rng if isinstance(rng, SeededRng) else None
    vals, best = [], None
    for r in range(config.restarts):
        sub = base.derive(r) if base is not None else rng
        f, xi, it = auto_pgd(problem, config, sub)
        vals.append(float(f))
        if best is None or f > best[0]:
            best = (f, xi, it)
    return SharpnessResult(float(best[0]), problem.export(best[1]), config.n_iter, int(best[2]), vals)


# ------------------------------------------------------------- objectives

class DiagonalObjective:
    """Loss ``‖X(u⊙v) − y‖²`` on flat parameters ``w = (u, v)``."""

    def __init__(self, data: RegressionData):
        self.data = data

    def flatten(self, params):
        return params.flat()

    def loss(self, w):
        return diagonal_loss(DiagonalParams.from_flat(w), self.data)

    def grad(self, w):
        return np.concatenate(diagonal_grad(DiagonalParams.from_flat(w), self.data))


class ScalarObjective(DiagonalObjective):
    """Scalar net as a one-coordinate diagonal net; flat order ``(θ2, θ1)``."""

    def __init__(self, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        super().__init__(RegressionData(x[:, None], y))

    def flatten(self, params):
        if isinstance(params, ScalarParams):
            return np.array([params.theta2, params.theta1], dtype=float)
        return np.asarray(params, dtype=float)


class MatrixNetObjective:
    """Mean softmax cross-entropy of ``W2 W1 x`` on the factor pair ``(W2, W1ᵀ)``."""

    def __init__(self, batch: ClassificationBatch):
        self.batch = batch

    def to_pair(self, params):
        return matrixnet_to_pair(params) if isinstance(params, MatrixNetParams) else params

    def flatten(self, params):
        return self.to_pair(params).flat()

    def pair_loss(self, point):
        return matrixnet_loss(pair_to_matrixnet(point), self.batch)

    def pair_grad(self, point):
        g1, g2 = matrixnet_grad(pair_to_matrixnet(point), self.batch)
        return TangentPair(g2, g1.T)


def _unflat(w, template):
    t = TangentPair.from_flat(w, template)
    return t.xi_G, t.xi_H


# ----------------------------------------------------- elementwise problems

class _ElementwiseProblem:
    """Perturbations of a flat vector under the weighted norm ``‖ξ / c‖``.

    ``perturb`` (``linear``/``exact``/``second_order``) and ``horizontal``
    control the map and feasible set for diagonal geodesic sharpness; with
    ``linear`` and no projection this is adaptive sharpness.
    """

    def __init__(self, objective, w, c, rho, mode="linear", metric=None, horizontal=False):
        self.obj = objective
        self.w = np.asarray(w, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.rho = float(rho)
        self.mode = mode
        self.metric = metric
        self.horizontal = horizontal
        self.f0 = objective.loss(self.w)
        self.d = self.w.size // 2

    def zero(self):
        return np.zeros_like(self.w)

    def export(self, xi):
        return xi

    def norm(self, xi):
        return float(np.linalg.norm(xi / self.c))

    def ascent_direction(self, xi, g):
        return g * self.c * self.c

    def sample(self, rng):
        z = _as_rng(rng).standard_normal(self.w.size)
        xi = z * self.c
        return xi * (self.rho / self.norm(xi))

    def _rates(self, xi):
        return xi / self.w

    def perturbed(self, xi):
        if self.mode == "linear":
            return self.w + xi
        if self.mode == "exact":
            z = self._rates(xi)
            if self.metric.kind == "inv":
                return self.w * np.exp(z)
            if np.any(1.0 + 2.0 * z <= 0):
                raise MixDomainError("Mix geodesic requires 1 + 2B > 0")
            return self.w * np.sqrt(1.0 + 2.0 * z)
        gam = self._christoffel(xi)
        return self.w + xi - 0.5 * gam

    def _pair(self, w):
        return FactorPair(w[: self.d, None, None], w[self.d:, None, None])

    def _tangent(self, xi):
        return TangentPair(xi[: self.d, None, None], xi[self.d:, None, None])

    def _christoffel(self, xi):
        return christoffel_quadratic(self.metric, self._pair(self.w), self._tangent(xi),
                                     check=False).flat()

    def objective(self, xi):
        return self.obj.loss(self.perturbed(xi)) - self.f0

    def gradient(self, xi):
        g = self.obj.grad(self.perturbed(xi))
        if self.mode == "linear":
            return g
        if self.mode == "exact":
            z = self._rates(xi)
            if self.metric.kind == "inv":
                return g * np.exp(z)
            return g / np.sqrt(1.0 + 2.0 * z)
        point = self._pair(self.w)
        vjp = _christoffel_vjp(self.metric, point, self._tangent(xi), self._tangent(g))
        return g - 0.5 * vjp.flat()

    def project(self, xi):
        if self.horizontal:
            xi = project_horizontal(self.metric, self._pair(self.w), self._tangent(xi)).flat()
        if self.mode == "exact" and self.metric.kind == "mix":
            xi = np.maximum(xi / self.w, MIX_MIN_RATE) * self.w
        n = self.norm(xi)
        if n > self.rho:
            xi = xi * (self.rho / n)
        return xi


def _diagonal_weights(metric: MetricKind, w):
    d = w.size // 2
    u, v = w[:d], w[d:]
    if metric.kind == "inv":
        c = np.abs(w)
    elif metric.kind == "mix":
        c = np.concatenate([1.0 / np.abs(v), 1.0 / np.abs(u)])
    else:
        c = np.ones_like(w)
    return c / np.sqrt(metric.scale)


def _christoffel_vjp(metric, point, xi, g):
    """Gradient of ``ξ ↦ ⟨g, Γ(ξ, ξ)⟩``.

    The map is quadratic, so the central difference ``(q(ξ + e) − q(ξ − e)) / 2``
    along each unit entry ``e`` is exact up to rounding. All entries (and all
    batch slots) are evaluated in one batched call.
    """
    G, H = point.G, point.H
    batch = G.shape[:-2]
    nG = G.shape[-2] * G.shape[-1]
    nH = H.shape[-2] * H.shape[-1]
    K = nG + nH
    eye = np.eye(K)
    lead = (K,) + (1,) * len(batch)
    EG = eye[:, :nG].reshape(lead + G.shape[-2:])
    EH = eye[:, nG:].reshape(lead + H.shape[-2:])

    def q(sign):
        t = TangentPair(xi.xi_G + sign * EG, xi.xi_H + sign * EH)
        gam = christoffel_quadratic(metric, point, t, check=False)
        return (np.sum(gam.xi_G * g.xi_G, axis=(-2, -1))
                + np.sum(gam.xi_H * g.xi_H, axis=(-2, -1)))

    diff = 0.5 * (q(1.0) - q(-1.0))  # shape (K,) + batch
    diff = np.moveaxis(diff, 0, -1)
    return TangentPair(diff[..., :nG].reshape(G.shape), diff[..., nG:].reshape(H.shape))


# ----------------------------------------------------- factor-pair problems

class _PairProblem:
    """Geodesic perturbations of a general factor pair under a quotient metric."""

    def __init__(self, objective: MatrixNetObjective, point: FactorPair, config: SharpnessConfig):
        if config.geodesic == "exact":
            raise ValueError("exact geodesics are only available for diagonal and scalar models")
        self.obj = objective
        self.x = point
        self.metric = config.metric
        self.mode = config.geodesic
        self.horizontal = config.horizontal
        self.rho = config.rho
        self.f0 = objective.pair_loss(point)
        if self.metric.kind != "euclidean":
            P, Q = grams(point, self.metric.epsilon)
            self._LP = np.linalg.cholesky(P)
            self._LQ = np.linalg.cholesky(Q)

    def zero(self):
        return TangentPair.zeros_like(self.x)

    def export(self, xi):
        return xi.flat()

    def norm(self, xi):
        return metric_norm(self.metric, self.x, xi)

    def ascent_direction(self, xi, g):
        return riemannian_gradient(self.metric, self.x, g)

    def sample(self, rng):
        g = _as_rng(rng)
        ZG = g.standard_normal(self.x.G.shape)
        ZH = g.standard_normal(self.x.H.shape)
        k = self.metric.kind
        if k == "inv":
            xi = TangentPair(ZG @ self._LP.T, ZH @ self._LQ.T)
        elif k == "mix":
            xi = TangentPair(np.linalg.solve(self._LQ, ZG.T).T, np.linalg.solve(self._LP, ZH.T).T)
        else:
            xi = TangentPair(ZG, ZH)
        return xi * (self.rho / self.norm(xi))

    def perturbed(self, xi):
        if self.mode == "linear":
            return self.x + xi
        gam = christoffel_quadratic(self.metric, self.x, xi, check=False)
        return self.x + (xi - 0.5 * gam)

    def objective(self, xi):
        return self.obj.pair_loss(self.perturbed(xi)) - self.f0

    def gradient(self, xi):
        g = self.obj.pair_grad(self.perturbed(xi))
        if self.mode == "linear":
            return g
        return g - 0.5 * _christoffel_vjp(self.metric, self.x, xi, g)

    def project(self, xi):
        if self.horizontal:
            xi = project_horizontal(self.metric, self.x, xi)
        n = self.norm(xi)
        if n > self.rho:
            xi = xi * (self.rho / n)
        return xi


# ------------------------------------------------------------- public API

def _rng(rng):
    if rng is None:
        return SeededRng(0)
    if isinstance(rng, (int, np.integer)):
        return SeededRng(int(rng))
    return rng


def adaptive_sharpness_worst(objective, params, c=None, rho=None, config=None, rng=None):
    """``max_{‖δ / c‖ ≤ ρ} L(θ + δ) − L(θ)`` by Auto-PGD (best over the trajectory).

    ``c`` defaults to ``|θ|``; ``rho`` overrides ``config.rho``.
    """
    config = config or SharpnessConfig()
    if rho is not None:
        config = replace(config, rho=rho)
    w = objective.flatten(params)
    c = np.abs(w) if c is None else np.broadcast_to(np.asarray(c, dtype=float), w.shape)
    if np.any(c <= 0):
        raise ValueError("scaling vector must be entrywise positive")
    if isinstance(objective, MatrixNetObjective):
        point = objective.to_pair(params)
        obj = _FlatPair(objective, point)
        problem = _ElementwiseProblem(obj, w, c, config.rho)
    else:
        problem = _ElementwiseProblem(objective, w, c, config.rho)
    return _run_restarts(problem, config, _rng(rng))


class _FlatPair:
    def __init__(self, objective, template):
        self.obj = objective
        self.template = template

    def loss(self, w):
        return self.obj.pair_loss(FactorPair(*_unflat(w, self.template)))

    def grad(self, w):
        return self.obj.pair_grad(FactorPair(*_unflat(w, self.template))).flat()


def geodesic_sharpness_worst(objective, params, config=None, rng=None):
    """``max L(γ_ξ(1)) − L(γ_ξ(0))`` over horizontal ``ξ`` with ``‖ξ‖_metric ≤ ρ``.

    Diagonal and scalar objectives support ``exact``, ``second_order`` and
    ``linear`` perturbations; the matrix net supports the latter two.
    """
    config = config or SharpnessConfig()
    m = config.metric
    if isinstance(objective, MatrixNetObjective):
        problem = _PairProblem(objective, objective.to_pair(params), config)
    else:
        w = objective.flatten(params)
        if m.kind != "euclidean" and np.any(w == 0):
            raise ValueError("quotient metrics need every parameter to be nonzero")
        if config.geodesic == "exact" and m.kind == "euclidean":
            raise ValueError("exact geodesics need the inv or mix metric")
        c = _diagonal_weights(m, w)
        problem = _ElementwiseProblem(objective, w, c, config.rho, mode=config.geodesic,
                                      metric=m, horizontal=config.horizontal)
    return _run_restarts(problem, config, _rng(rng))


def batch_mean_sharpness(fn, objectives, params, **kwargs):
    """Mean of a sharpness measure evaluated separately on each batch."""
    vals = [fn(obj, params, **kwargs).value for obj in objectives]
    return float(np.mean(vals))


# ---------------------------------------------------------- closed forms

def diagonal_sharpness_closed_form(kind, beta0, beta_star, rho):
    """Geodesic sharpness of a diagonal net on whitened data.

    ``rho`` is the radius in the metric norm for both kinds.

    ``inv``: maximum of the second-order model ``4Bᵀr + 4BᵀDB`` over
    ``‖B‖ ≤ ρ/√2`` where ``B`` is the horizontal rate (``ξ = (B⊙u, B⊙v)``, whose
    Inv norm is ``√2‖B‖``), ``r = β₀⊙(β₀ − β*)``, ``D = diag(β₀⊙(2β₀ − β*))``.
    Solved as a trust-region problem through its multiplier ``λ``:
    ``B(λ) = 4r / (λ − 8D)`` with ``‖B(λ)‖ = ρ/√2``.

    ``mix``: the loss along Mix geodesics is exactly quadratic in ``B`` and the
    maximum is ``2√2 ρ‖β₀ − β*‖ + 2ρ²``.
    """
    beta0 = np.asarray(beta0, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta0.shape != beta_star.shape:
        raise ValueError("beta0 and beta_star must have the same shape")
    if not rho > 0:
        raise ValueError("rho must be positive")
    kind = _as_metric(kind).kind
    if kind == "mix":
        return float(2.0 * np.sqrt(2.0) * rho * np.linalg.norm(beta0 - beta_star) + 2.0 * rho**2)
    if kind != "inv":
        raise ValueError("closed forms exist for the inv and mix metrics")
    r = beta0 * (beta0 - beta_star)
    dd = beta0 * (2.0 * beta0 - beta_star)
    return _trust_region_max(4.0 * r, 4.0 * dd, rho / np.sqrt(2.0))


def _trust_region_max(a, dd, rho):
    """``max aᵀB + Σ dᵢBᵢ²`` subject to ``‖B‖ ≤ ρ``."""
    dmax = float(np.max(dd))
    na = float(np.linalg.norm(a))

    def val(B):
        return float(a @ B + dd @ (B * B))

    if na == 0.0:
        return max(0.0, rho * rho * dmax)
    if dmax < 0:
        B = -a / (2.0 * dd)
        if np.linalg.norm(B) <= rho:
            return val(B)

    def B_of(lam):
        return a / (lam - 2.0 * dd)

    lo = max(2.0 * dmax, 0.0)
    hi = lo + na / rho
    phi = lambda lam: float(np.linalg.norm(B_of(lam))) - rho  # noqa: E731
    lam_lo = lo + 1e-13 * max(1.0, hi - lo)
    if phi(lam_lo) <= 0.0:
        # hard case: the gradient has no component on the top eigen-coordinates
        top = np.isclose(dd, dmax, rtol=0.0, atol=1e-14 * max(1.0, abs(dmax)))
        B = np.zeros_like(a)
        free = ~top
        B[free] = a[free] / (2.0 * dmax - 2.0 * dd[free])
        rest = rho * rho - float(B @ B)
        i = int(np.flatnonzero(top)[0])
        B[i] = np.sqrt(max(rest, 0.0))
        return val(B)
    if phi(hi) > 0:
        hi = lo + 2.0 * na / rho
    try:
        lam = brentq(phi, lam_lo, hi, xtol=1e-15, rtol=1e-14, maxiter=500)
    except (ValueError, RuntimeError) as exc:
        raise RuntimeError(f"multiplier root-finding failed: {exc}") from exc
    return val(B_of(lam))


def scalar_sharpness_closed_form(G0, H0, x, y, rho, grid=4001):
    """Geodesic sharpness of the scalar net under the Inv metric.

    Along exact geodesics the prediction is ``y0 e^{2B}``; the Inv norm of the
    direction is ``√2|B|``, so ``|B| ≤ ρ/√2``. Maximizes
    ``Σ y0²(e^{4B} − 1) − 2 y y0 (e^{2B} − 1)`` by grid search and a bounded
    polish around the best grid point.
    """
    if G0 == 0 or H0 == 0:
        raise ValueError("scalar factors must be nonzero")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y0 = G0 * H0 * x
    bmax = rho / np.sqrt(2.0)

    def f(B):
        return float(np.sum(y0**2 * np.expm1(4.0 * B) - 2.0 * y * y0 * np.expm1(2.0 * B)))

    Bs = np.linspace(-bmax, bmax, grid)
    vals = np.array([f(b) for b in Bs])
    i = int(np.argmax(vals))
    a, b = Bs[max(i - 1, 0)], Bs[min(i + 1, grid - 1)]
    best = vals[i]
    if b > a:
        res = minimize_scalar(lambda t: -f(t), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-14 * max(1.0, bmax)})
        best = max(best, -res.fun)
    return float(max(best, 0.0))


# ----------------------------------------------------------- group norm

def group_norm(groups=(), elementwise=()):
    """Combined norm of an update spread over several parameter groups.

    ``groups`` holds ``(kind, point, tangent)`` factor-pair groups, each measured
    in its own metric; ``elementwise`` holds ``(w, ξ_w)`` pairs measured as
    ``‖ξ_w / |w|‖``. The result is the root of the summed squares.
    """
    total = 0.0
    for kind, point, xi in groups:
        total += metric_inner(kind, point, xi, xi)
    for w, xi in elementwise:
        w = np.asarray(w, dtype=float)
        if np.any(w == 0):
            raise ValueError("elementwise groups need nonzero weights")
        total += float(np.sum((np.asarray(xi, dtype=float) / np.abs(w)) ** 2))
    return float(np.sqrt(total))
