"""Three analytic model families with GL(h) rescale symmetry.

* scalar net ``x ↦ θ2 θ1 x`` with square loss, ordering ``(θ2, θ1)``
* diagonal linear net ``β = u ⊙ v`` with loss ``‖X β − y‖²``
* shallow linear net ``x ↦ W2 W1 x`` with mean softmax cross-entropy

Each family has an adapter to the factor-pair view used by :mod:`geometry`:
scalar ``G = θ2, H = θ1``; diagonal ``d`` pairs ``G = uᵢ, H = vᵢ``; matrix
net ``G = W2, H = W1ᵀ``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import FactorPair, TangentPair, _t
from .numerics import _as_rng, thin_qr

__all__ = [
    "ScalarParams", "DiagonalParams", "MatrixNetParams", "RegressionData",
    "ClassificationBatch", "TrainTrace", "DivergenceError", "PreconditionError",
    "scalar_loss", "scalar_euclidean_grad", "scalar_euclidean_hessian", "scalar_to_pair",
    "scalar_riemannian_hessian_trace",
    "diagonal_loss", "diagonal_grad", "diagonal_hvp", "diagonal_hessian",
    "diagonal_hessian_at_min", "diagonal_to_pair", "pair_to_diagonal",
    "matrixnet_loss", "matrixnet_grad", "matrixnet_hvp", "matrixnet_to_pair",
    "pair_to_matrixnet", "matrixnet_flat", "matrixnet_from_flat",
    "generate_sparse_regression", "generate_whitened_regression",
    "generate_classification_batch", "train_diagonal",
    "check_gl_gradient_constraint", "check_local_constraints", "load_idx",
]


class DivergenceError(RuntimeError):
    """Training or ascent produced a non-finite or exploding loss."""


class PreconditionError(ValueError):
    """An operation was called outside its stated preconditions."""


# ---------------------------------------------------------------- scalar net

@dataclass(frozen=True)
class ScalarParams:
    theta1: float
    theta2: float


def scalar_loss(p: ScalarParams, x, y):
    """``Σ (θ2 θ1 x − y)²`` over the supplied data (a single datum gives the plain value)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.sum((p.theta2 * p.theta1 * x - y) ** 2))


def scalar_euclidean_grad(p: ScalarParams, x, y):
    """``(∂_{θ2} ℓ, ∂_{θ1} ℓ) = 2x(θ2θ1x − y)·(θ1, θ2)`` summed over data."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    r = np.sum(2.0 * x * (p.theta2 * p.theta1 * x - y))
    return np.array([r * p.theta1, r * p.theta2])


def scalar_euclidean_hessian(p: ScalarParams, x, y):
    """Hessian in ``(θ2, θ1)`` ordering, summed over data."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    t1, t2 = p.theta1, p.theta2
    a = np.sum(2.0 * x * x)
    off = np.sum(2.0 * x * (2.0 * x * t1 * t2 - y))
    return np.array([[a * t1 * t1, off], [off, a * t2 * t2]])


def scalar_to_pair(p: ScalarParams) -> FactorPair:
    return FactorPair([[p.theta2]], [[p.theta1]])


def scalar_riemannian_hessian_trace(p: ScalarParams, x, y):
    """Hessian trace on the one-dimensional quotient under the Inv metric.

    Computed as ``d²/dt² ℓ(γ(t))`` at ``t = 0`` along the exact unit-speed
    horizontal geodesic ``γ(t) = (θ2 e^{t/√2}, θ1 e^{t/√2})``. Along it the
    prediction is ``y0 e^{√2 t}``, which gives ``Σ 4 y0 (2 y0 − y)`` with
    ``y0 = θ2 θ1 x``.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    y0 = p.theta2 * p.theta1 * x
    return float(np.sum(4.0 * y0 * (2.0 * y0 - y)))


# -------------------------------------------------------------- diagonal net

@dataclass(frozen=True)
class DiagonalParams:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.ndim != 1 or u.shape != v.shape:
            raise ValueError(f"u and v must be equal-length vectors, got {u.shape}, {v.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def beta(self):
        return self.u * self.v

    def flat(self):
        return np.concatenate([self.u, self.v])

    @classmethod
    def from_flat(cls, w):
        w = np.asarray(w, dtype=float)
        d = w.size // 2
        return cls(w[:d], w[d:])


@dataclass(frozen=True)
class RegressionData:
    X: np.ndarray
    y: np.ndarray
    beta_star: np.ndarray | None = None
    whitened: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"X must be n×d and y length n, got {X.shape}, {y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.beta_star is not None:
            object.__setattr__(self, "beta_star", np.asarray(self.beta_star, dtype=float))
        if self.whitened:
            res = np.linalg.norm(X.T @ X - np.eye(X.shape[1]))
            if res > 1e-10:
                raise ValueError(f"data labelled whitened but ‖XᵀX − I‖ = {res:.3g}")


def _check_diag(p: DiagonalParams, data: RegressionData):
    if p.u.size != data.X.shape[1]:
        raise ValueError(f"parameter dimension {p.u.size} does not match data width {data.X.shape[1]}")


def diagonal_loss(p: DiagonalParams, data: RegressionData):
    _check_diag(p, data)
    r = data.X @ (p.u * p.v) - data.y
    return float(r @ r)


def diagonal_grad(p: DiagonalParams, data: RegressionData):
    """``(2 v ⊙ Xᵀr, 2 u ⊙ Xᵀr)`` with residual ``r = X(u⊙v) − y``."""
    _check_diag(p, data)
    g = 2.0 * (data.X.T @ (data.X @ (p.u * p.v) - data.y))
    return p.v * g, p.u * g


def diagonal_hvp(p: DiagonalParams, data: RegressionData, xi_u, xi_v):
    """Exact Hessian-vector product with direction ``(ξ_u, ξ_v)``."""
    _check_diag(p, data)
    X = data.X
    g = 2.0 * (X.T @ (X @ (p.u * p.v) - data.y))
    dbeta = xi_u * p.v + p.u * xi_v
    dg = 2.0 * (X.T @ (X @ dbeta))
    return p.v * dg + xi_v * g, p.u * dg + xi_u * g


def diagonal_hessian(p: DiagonalParams, data: RegressionData):
    """Dense ``2d×2d`` Hessian in ``(u, v)`` ordering, valid at any point."""
    _check_diag(p, data)
    X = data.X
    K = 2.0 * X.T @ X
    g = K @ (p.u * p.v) - 2.0 * X.T @ data.y
    uu = p.v[:, None] * K * p.v[None, :]
    vv = p.u[:, None] * K * p.u[None, :]
    uv = p.v[:, None] * K * p.u[None, :] + np.diag(g)
    return np.block([[uu, uv], [uv.T, vv]])


def diagonal_hessian_at_min(p: DiagonalParams, data: RegressionData, grad_tol=1e-6):
    """Hessian at a global minimum with whitened data.

    There the blocks are ``2·[[diag(v²), diag(u⊙v)], [diag(u⊙v), diag(u²)]]``
    and the trace is ``2 Σ (uᵢ² + vᵢ²)``.
    """
    _check_diag(p, data)
    d = p.u.size
    if np.linalg.norm(data.X.T @ data.X - np.eye(d)) > 1e-10:
        raise PreconditionError("whitened data required (XᵀX = I)")
    gu, gv = diagonal_grad(p, data)
    if np.linalg.norm(np.concatenate([gu, gv])) > grad_tol:
        raise PreconditionError("gradient is not zero; the point is not a minimum")
    u, v = p.u, p.v
    return 2.0 * np.block([[np.diag(v * v), np.diag(u * v)], [np.diag(u * v), np.diag(u * u)]])


def diagonal_to_pair(p: DiagonalParams) -> FactorPair:
    return FactorPair(p.u[:, None, None], p.v[:, None, None])


def pair_to_diagonal(point: FactorPair) -> DiagonalParams:
    return DiagonalParams(point.G.reshape(-1), point.H.reshape(-1))


# ---------------------------------------------------------------- matrix net

@dataclass(frozen=True)
class MatrixNetParams:
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        W1 = np.asarray(self.W1, dtype=float)
        W2 = np.asarray(self.W2, dtype=float)
        if W1.ndim != 2 or W2.ndim != 2 or W1.shape[0] != W2.shape[1]:
            raise ValueError(f"need W1 h×D_in and W2 D_out×h, got {W1.shape}, {W2.shape}")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)


@dataclass(frozen=True)
class ClassificationBatch:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.labels)
        if X.ndim != 2 or X.shape[0] < 1 or y.shape != (X.shape[0],):
            raise ValueError(f"need N×D_in inputs and N labels, got {X.shape}, {y.shape}")
        if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
            raise ValueError("labels must be non-negative integers")
        if self.n_classes is not None and y.max() >= self.n_classes:
            raise ValueError("label out of range")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y.astype(np.int64))


def _check_net(p: MatrixNetParams, batch: ClassificationBatch):
    if p.W1.shape[1] != batch.inputs.shape[1]:
        raise ValueError(f"W1 expects {p.W1.shape[1]} inputs, batch has {batch.inputs.shape[1]}")
    if batch.labels.max() >= p.W2.shape[0]:
        raise ValueError("label exceeds the number of output classes")


def _softmax_parts(p, batch):
    Z = batch.inputs @ p.W1.T @ p.W2.T
    zmax = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - zmax)
    s = E.sum(axis=1, keepdims=True)
    return Z, zmax[:, 0] + np.log(s[:, 0]), E / s


def matrixnet_loss(p: MatrixNetParams, batch: ClassificationBatch):
    """Mean softmax cross-entropy of the logits ``W2 W1 x``."""
    _check_net(p, batch)
    Z, lse, _ = _softmax_parts(p, batch)
    N = Z.shape[0]
    return float(np.mean(lse - Z[np.arange(N), batch.labels]))


def _dlogits(p, batch):
    _, _, S = _softmax_parts(p, batch)
    N = S.shape[0]
    S = S.copy()
    S[np.arange(N), batch.labels] -= 1.0
    return S / N


def matrixnet_grad(p: MatrixNetParams, batch: ClassificationBatch):
    _check_net(p, batch)
    X = batch.inputs
    D = _dlogits(p, batch)
    return p.W2.T @ D.T @ X, D.T @ (X @ p.W1.T)


def matrixnet_hvp(p: MatrixNetParams, batch: ClassificationBatch, direction):
    """Exact Hessian-vector product; ``direction = (ξ_W1, ξ_W2)``."""
    _check_net(p, batch)
    V1, V2 = (np.asarray(a, dtype=float) for a in direction)
    if V1.shape != p.W1.shape or V2.shape != p.W2.shape:
        raise ValueError("direction shapes do not match the parameters")
    X = batch.inputs
    N = X.shape[0]
    _, _, S = _softmax_parts(p, batch)
    D = S.copy()
    D[np.arange(N), batch.labels] -= 1.0
    D /= N
    XW1 = X @ p.W1.T
    XV1 = X @ V1.T
    dZ = XV1 @ p.W2.T + XW1 @ V2.T
    SdZ = S * dZ
    dD = (SdZ - S * SdZ.sum(axis=1, keepdims=True)) / N
    H1 = V2.T @ D.T @ X + p.W2.T @ dD.T @ X
    H2 = dD.T @ XW1 + D.T @ XV1
    return H1, H2


def matrixnet_to_pair(p: MatrixNetParams) -> FactorPair:
    return FactorPair(p.W2, p.W1.T)


def pair_to_matrixnet(point: FactorPair) -> MatrixNetParams:
    return MatrixNetParams(point.H.T, point.G)


def matrixnet_flat(W1, W2):
    """Column-stacked ``(vec W1, vec W2)``."""
    return np.concatenate([np.ravel(W1, order="F"), np.ravel(W2, order="F")])


def matrixnet_from_flat(w, h, D_in, D_out):
    w = np.asarray(w, dtype=float)
    k = h * D_in
    if w.size != k + D_out * h:
        raise ValueError("flat vector size does not match (h, D_in, D_out)")
    return w[:k].reshape((h, D_in), order="F"), w[k:].reshape((D_out, h), order="F")


# ------------------------------------------------------------------ data

def _sparse_beta(d, sparsity, g):
    if not 0 <= sparsity < 1:
        raise ValueError("sparsity must lie in [0, 1)")
    n_zero = int(round(sparsity * d))
    beta = g.standard_normal(d)
    beta[g.permutation(d)[:n_zero]] = 0.0
    return beta


def generate_sparse_regression(n, d, sparsity, noise, rng) -> RegressionData:
    """Gaussian design, ``β*`` with exactly ``round(sparsity·d)`` zeros, ``y = Xβ* + noise·z``."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    g = _as_rng(rng)
    beta = _sparse_beta(d, sparsity, g)
    X = g.standard_normal((n, d))
    y = X @ beta
    if noise:
        y = y + noise * g.standard_normal(n)
    return RegressionData(X, y, beta)


def generate_whitened_regression(n, d, sparsity, rng, noise=0.0) -> RegressionData:
    """Design with orthonormal columns (``XᵀX = I``) from the thin QR of a Gaussian matrix."""
    if n < d:
        raise ValueError(f"whitened data needs n ≥ d, got n={n}, d={d}")
    g = _as_rng(rng)
    beta = _sparse_beta(d, sparsity, g)
    X = thin_qr(g.standard_normal((n, d)))
    y = X @ beta
    if noise:
        y = y + noise * g.standard_normal(n)
    return RegressionData(X, y, beta, whitened=True)


def generate_classification_batch(N, D_in, D_out, rng) -> ClassificationBatch:
    """Standard-normal inputs with uniformly random labels."""
    g = _as_rng(rng)
    X = g.standard_normal((N, D_in))
    y = g.integers(0, D_out, size=N)
    return ClassificationBatch(X, y, D_out)


# ---------------------------------------------------------------- training

@dataclass
class TrainTrace:
    converged: bool
    iterations: int
    final_loss: float
    lr: float
    init_scale: float
    losses: list = field(default_factory=list)


def train_diagonal(data: RegressionData, lr, init_scale, tol=1e-5, max_iters=200_000, rng=None,
                   log_every=1000, init=None):
    """Full-batch gradient descent on ``‖X(u⊙v) − y‖²``.

    Initialization: ``|uᵢ|, |vᵢ|`` uniform on ``[0.5, 1.5]·init_scale`` with
    independent random signs (or ``init`` if given). Stops as soon as the loss is
    at most ``tol``. Raises :class:`DivergenceError` when the loss exceeds 1e8.
    """
    if not lr > 0 or not tol > 0:
        raise ValueError("lr and tol must be positive")
    d = data.X.shape[1]
    if init is None:
        g = _as_rng(rng)
        mag = g.uniform(0.5, 1.5, size=(2, d)) * init_scale
        sign = np.where(g.integers(0, 2, size=(2, d)) == 1, 1.0, -1.0)
        u, v = mag[0] * sign[0], mag[1] * sign[1]
    else:
        u, v = np.array(init.u, dtype=float), np.array(init.v, dtype=float)
    X, y = data.X, data.y
    K = 2.0 * (X.T @ X)
    b = 2.0 * (X.T @ y)
    yy = float(y @ y)
    losses = []
    it = 0
    loss = np.inf
    while True:
        beta = u * v
        Kb = K @ beta
        # ‖Xβ − y‖² = ½βᵀKβ − bᵀβ + yᵀy
        loss = 0.5 * float(beta @ Kb) - float(b @ beta) + yy
        if not np.isfinite(loss) or loss > 1e8:
            raise DivergenceError(f"loss {loss:.3g} at iteration {it}")
        if log_every and it % log_every == 0:
            losses.append(loss)
        if loss <= tol or it >= max_iters:
            break
        gb = Kb - b
        u, v = u - lr * v * gb, v - lr * u * gb
        it += 1
    # recompute the final loss from residuals for an accurate report
    final = float(np.sum((X @ (u * v) - y) ** 2))
    trace = TrainTrace(final <= tol, it, final, float(lr), float(init_scale), losses)
    return DiagonalParams(u, v), trace


# ------------------------------------------------------- symmetry constraints

def check_gl_gradient_constraint(point, grad):
    """Residual of the gradient's orthogonality to every vertical generator.

    For a FactorPair and TangentPair gradient: ``‖Gᵀ∂_G − (∂_H)ᵀH‖_F``. For
    DiagonalParams and a ``(g_u, g_v)`` gradient: ``maxᵢ |uᵢ g_uᵢ − vᵢ g_vᵢ|``.
    Scalar and matrix-net parameters are mapped to their factor pairs first.
    """
    if isinstance(point, DiagonalParams):
        gu, gv = (np.asarray(a, dtype=float) for a in grad)
        if gu.shape != point.u.shape or gv.shape != point.v.shape:
            raise ValueError("gradient shape does not match parameters")
        return float(np.max(np.abs(point.u * gu - point.v * gv)))
    if isinstance(point, ScalarParams):
        g = np.asarray(grad, dtype=float)
        point, grad = scalar_to_pair(point), TangentPair([[g[0]]], [[g[1]]])
    elif isinstance(point, MatrixNetParams):
        gW1, gW2 = grad
        point, grad = matrixnet_to_pair(point), TangentPair(gW2, np.asarray(gW1).T)
    if not isinstance(grad, TangentPair):
        raise TypeError("gradient must be a TangentPair for a FactorPair point")
    if grad.xi_G.shape != point.G.shape or grad.xi_H.shape != point.H.shape:
        raise ValueError("gradient shape does not match the point")
    D = _t(point.G) @ grad.xi_G - _t(grad.xi_H) @ point.H
    return float(np.linalg.norm(D.ravel()))


def check_local_constraints(kind, theta, grad, hvp, mask_a, mask_b=None):
    """Residuals of the local gradient/Hessian identities implied by a symmetry.

    ``theta`` and ``grad`` are flat vectors, ``hvp`` maps a flat vector to the
    Hessian applied to it, masks are boolean vectors selecting parameter groups.

    translation of group A: ``⟨∇_A, 1⟩``, ``[H 1_A]_A``
    scale of group A: ``⟨∇_A, θ_A⟩``, ``H θ_A + ∇_A``, ``θ_Aᵀ H θ_A``
    rescale (A1 up, A2 down): ``⟨∇_A1, θ_A1⟩ − ⟨∇_A2, θ_A2⟩``,
    ``H s + ∇ ⊙ (1_A1 − 1_A2)``, ``sᵀ H s + 2⟨∇_A2, θ_A2⟩`` with
    ``s = θ ⊙ (1_A1 − 1_A2)``.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    a = np.asarray(mask_a, dtype=bool)
    if a.shape != theta.shape or grad.shape != theta.shape:
        raise ValueError("theta, grad and masks must share one flat shape")
    if kind in ("translation", "scale"):
        if mask_b is not None:
            raise ValueError(f"{kind} constraints take a single mask")
    elif kind == "rescale":
        if mask_b is None:
            raise ValueError("rescale constraints need two masks")
        b = np.asarray(mask_b, dtype=bool)
        if b.shape != theta.shape:
            raise ValueError("mask shape mismatch")
        if np.any(a & b):
            raise ValueError("rescale masks must be disjoint")
    else:
        raise ValueError(f"unknown constraint kind {kind!r}")

    if kind == "translation":
        one = a.astype(float)
        return {
            "gradient": abs(float(grad[a].sum())),
            "hessian": float(np.max(np.abs(hvp(one)[a]), initial=0.0)),
        }
    if kind == "scale":
        ta = np.where(a, theta, 0.0)
        Ht = hvp(ta)
        return {
            "gradient": abs(float(grad @ ta)),
            "hessian": float(np.max(np.abs(Ht + np.where(a, grad, 0.0)))),
            "curvature": abs(float(ta @ Ht)),
        }
    sign = a.astype(float) - b.astype(float)
    s = theta * sign
    Hs = hvp(s)
    g2 = float(grad[b] @ theta[b])
    return {
        "gradient": abs(float(grad[a] @ theta[a]) - g2),
        "hessian": float(np.max(np.abs(Hs + grad * sign))),
        "curvature": abs(float(s @ Hs) + 2.0 * g2),
    }


# ------------------------------------------------------------------ IDX files

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def load_idx(source):
    """Read an IDX file (path or bytes).

    Image files come back as an ``N × (rows·cols)`` float array scaled to
    ``[0, 1]``; label files as an int64 vector.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        raw = bytes(source)
    else:
        raw = Path(source).read_bytes()
    if len(raw) < 4:
        raise ValueError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (_IDX_IMAGES, _IDX_LABELS):
        raise ValueError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ValueError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise ValueError(f"truncated IDX payload: expected {count} bytes, found {len(raw) - head}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=head)
    if magic == _IDX_LABELS:
        return data.astype(np.int64)
    return data.reshape(dims[0], -1).astype(float) / 255.0
