"""Small dense numerical kernels shared by the rest of the package.

Everything here is deterministic given its inputs; randomness goes through
:class:`SeededRng`, which derives independent sub-streams from a master seed so
that parallel and serial runs draw identical numbers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SeededRng",
    "SingularOperatorError",
    "solve_sylvester",
    "sylvester_solve",
    "thin_qr",
    "sample_rademacher",
    "sample_gl_matrix",
    "kendall_tau",
]

_MASK64 = (1 << 64) - 1
SYLVESTER_MAX_COND = 1e12


class SingularOperatorError(np.linalg.LinAlgError):
    """Raised when a linear system is numerically singular."""


class SeededRng:
    """A single-owner random stream identified by ``(seed, stream path)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    ``SeededRng(s).derive(i)`` is the same stream in every process and distinct
    indices give independent streams.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0 or seed > _MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def derive(self, stream_id: int) -> "SeededRng":
        """Independent child stream; does not advance this stream."""
        if stream_id < 0 or stream_id > _MASK64:
            raise ValueError(f"stream id must be an unsigned 64-bit integer, got {stream_id}")
        return SeededRng(self.seed, self.stream + (stream_id,))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, SeededRng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected SeededRng or numpy Generator, got {type(rng).__name__}")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite entries are not admitted")


def solve_sylvester(A, C, B, max_cond=SYLVESTER_MAX_COND):
    """Solve ``A X + X C = B`` for square ``A``, ``C`` (leading batch dims allowed).

    Vectorizes to the h²×h² system ``(A ⊗ I + I ⊗ Cᵀ) vec_r(X) = vec_r(B)`` and
    uses dense LU. The cost is O(h⁶), fine for h up to a few dozen.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_finite(A, C, B)
    h = A.shape[-1]
    if A.shape[-2:] != (h, h) or C.shape[-2:] != (h, h) or B.shape[-2:] != (h, h):
        raise ValueError(f"shape mismatch: A {A.shape}, C {C.shape}, B {B.shape}")
    batch = np.broadcast_shapes(A.shape[:-2], C.shape[:-2], B.shape[:-2])
    A = np.broadcast_to(A, batch + (h, h))
    C = np.broadcast_to(C, batch + (h, h))
    B = np.broadcast_to(B, batch + (h, h))
    eye = np.eye(h)
    # K[i*h + j, k*h + l] = A[i, k] δ_jl + δ_ik C[l, j]
    K = np.einsum("...ik,jl->...ijkl", A, eye) + np.einsum("ik,...lj->...ijkl", eye, C)
    K = K.reshape(batch + (h * h, h * h))
    if h == 1:
        K = K[..., 0, 0]
        if np.any(np.abs(K) <= 1e-300):
            raise SingularOperatorError("Sylvester operator is singular (zero coefficient)")
        return (B[..., 0, 0] / K)[..., None, None]
    cond = np.linalg.cond(K)
    if np.any(~np.isfinite(cond)) or np.any(cond > max_cond):
        raise SingularOperatorError(
            f"Sylvester operator is numerically singular (condition {np.max(cond):.3g})"
        )
    x = np.linalg.solve(K, B.reshape(batch + (h * h, 1)))
    return x.reshape(batch + (h, h))


def sylvester_solve(A, B):
    """Solve ``A Λ + Λ Aᵀ = B``."""
    A = np.asarray(A, dtype=float)
    return solve_sylvester(A, np.swapaxes(A, -1, -2), B)


def thin_qr(M):
    """Orthonormal basis ``Q`` (D×k) whose range contains ``range(M)``.

    Rank-deficient inputs are fine: columns of Householder QR are orthonormal
    regardless, so the trailing columns simply complete the basis.
    """
    M = np.asarray(M, dtype=float)
    _check_finite(M)
    if M.ndim != 2 or M.shape[1] > M.shape[0]:
        raise ValueError(f"thin_qr needs a D×k matrix with k ≤ D, got {M.shape}")
    if M.shape[1] == 0:
        return np.zeros_like(M)
    Q, _ = np.linalg.qr(M, mode="reduced")
    return Q


def sample_rademacher(dim, rng):
    """Vector of i.i.d. ±1 entries."""
    if dim < 1:
        raise ValueError("dim must be at least 1")
    g = _as_rng(rng)
    return 2.0 * g.integers(0, 2, size=dim).astype(float) - 1.0


def sample_gl_matrix(h, rng, return_eigenvalues=False):
    """Random invertible h×h matrix with eigenvalues uniform on [−10,−1] ∪ [1,10].

    Built as ``P diag(λ) Pᵀ`` with ``P`` the Q-factor of a Gaussian matrix, so
    the spectrum is real and exactly the sampled one.
    """
    if h < 1:
        raise ValueError("h must be at least 1")
    g = _as_rng(rng)
    mags = g.uniform(1.0, 10.0, size=h)
    signs = np.where(g.integers(0, 2, size=h) == 1, 1.0, -1.0)
    lam = signs * mags
    P, R = np.linalg.qr(g.standard_normal((h, h)))
    P = P * np.sign(np.diag(R))
    A = (P * lam) @ P.T
    if return_eigenvalues:
        return A, lam
    return A


def kendall_tau(t, s):
    """Kendall's τ-a: mean pairwise product of ranking signs (ties count 0)."""
    t = np.asarray(t, dtype=float).ravel()
    s = np.asarray(s, dtype=float).ravel()
    if t.shape != s.shape:
        raise ValueError(f"length mismatch: {t.size} vs {s.size}")
    M = t.size
    if M < 2:
        raise ValueError("kendall_tau needs at least two observations")
    iu = np.triu_indices(M, k=1)
    dt = np.sign(t[:, None] - t[None, :])[iu]
    ds = np.sign(s[:, None] - s[None, :])[iu]
    return float(2.0 / (M * (M - 1)) * np.sum(dt * ds))
