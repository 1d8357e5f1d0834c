"""Small dense matrix and tensor arithmetic.

Everything here acts on a single point's worth of data (matrices of size
at most ~8x8), so the Jacobi kernels below favour robustness over speed.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._accel import njit, use_numba
from .errors import PreconditionError, ShapeError

DEFAULT_TAU = 1e-8


def contract(S, T, axes=None):
    """Contraction ``S : T``.

    With ``axes=None`` every slot of ``T`` is paired with the trailing
    ``T.ndim`` slots of ``S`` (so two equal-shape matrices give
    ``tr(S^T T)``). Otherwise ``axes=(s_axes, t_axes)`` lists the paired
    slots explicitly, e.g. ``contract(kpp, d2u, axes=((1, 2, 3), (1, 0, 2)))``
    for ``K_{a i b j} D2u_{b i j}``.
    """
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    if axes is None:
        k = T.ndim
        if k > S.ndim:
            raise ShapeError(f"cannot contract {T.ndim}-tensor into {S.ndim}-tensor")
        axes = (tuple(range(S.ndim - k, S.ndim)), tuple(range(k)))
    s_ax, t_ax = (tuple(a) for a in axes)
    if len(s_ax) != len(t_ax):
        raise ShapeError("slot lists differ in length")
    for a, b in zip(s_ax, t_ax):
        if S.shape[a] != T.shape[b]:
            raise ShapeError(f"slot {a} of S has size {S.shape[a]}, slot {b} of T has {T.shape[b]}")
    out = np.tensordot(S, T, axes=(s_ax, t_ax))
    return float(out) if out.ndim == 0 else out


def _square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    return A


def cofactor(A):
    """Cofactor matrix, ``cof(A)_ij = (-1)^(i+j) det(minor_ij)``."""
    A = _square(A)
    n = A.shape[0]
    if n == 1:
        return np.ones((1, 1))
    C = np.empty_like(A)
    for i, j in itertools.product(range(n), repeat=2):
        minor = np.delete(np.delete(A, i, axis=0), j, axis=1)
        C[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return C


def ahlfors(A):
    """Symmetric traceless part ``(A + A^T)/2 - tr(A)/n I``."""
    A = _square(A)
    n = A.shape[0]
    return 0.5 * (A + A.T) - (np.trace(A) / n) * np.eye(n)


# --- Jacobi kernels -----------------------------------------------------------

@njit
def _jacobi_sweep_svd(U, V, max_sweeps):
    m, k = U.shape
    for _ in range(max_sweeps):
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    alpha += U[r, p] * U[r, p]
                    beta += U[r, q] * U[r, q]
                    gamma += U[r, p] * U[r, q]
                if gamma == 0.0 or abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    up = U[r, p]
                    uq = U[r, q]
                    U[r, p] = c * up - s * uq
                    U[r, q] = s * up + c * uq
                for r in range(k):
                    vp = V[r, p]
                    vq = V[r, q]
                    V[r, p] = c * vp - s * vq
                    V[r, q] = s * vp + c * vq
        if not rotated:
            break


@njit
def _svd_tall(A):
    # one-sided Jacobi on the columns of a tall (m >= k) matrix
    m, k = A.shape
    U = A.copy()
    V = np.eye(k)
    _jacobi_sweep_svd(U, V, 80)
    sigma = np.zeros(k)
    for j in range(k):
        s2 = 0.0
        for r in range(m):
            s2 += U[r, j] * U[r, j]
        sigma[j] = np.sqrt(s2)
    order = np.argsort(-sigma)
    Uo = np.zeros((m, k))
    Vo = np.zeros((k, k))
    so = np.zeros(k)
    for jj in range(k):
        j = order[jj]
        so[jj] = sigma[j]
        for r in range(m):
            Uo[r, jj] = U[r, j] / sigma[j] if sigma[j] > 0.0 else 0.0
        for r in range(k):
            Vo[r, jj] = V[r, j]
    return Uo, so, Vo


def jacobi_svd(M):
    """Thin SVD ``M = U diag(s) V^T`` by one-sided Jacobi, ``s`` descending.

    Left vectors belonging to exactly-zero singular values are returned as
    zero columns; callers only use the vectors above a rank cutoff.
    """
    M = np.ascontiguousarray(M, dtype=float)
    if M.ndim != 2:
        raise ShapeError("expected a matrix")
    if M.shape[0] >= M.shape[1]:
        return _svd_tall(M)
    U, s, V = _svd_tall(np.ascontiguousarray(M.T))
    return V, s, U


@njit
def _jacobi_eigh(A, max_sweeps):
    n = A.shape[0]
    A = A.copy()
    V = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += A[i, j] * A[i, j]
    scale = np.sqrt(scale)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += A[i, j] * A[i, j]
        if np.sqrt(off) <= 1e-17 * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                sgn = 1.0 if theta >= 0.0 else -1.0
                t = sgn / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    arp = A[r, p]
                    arq = A[r, q]
                    A[r, p] = c * arp - s * arq
                    A[r, q] = s * arp + c * arq
                for r in range(n):
                    apr = A[p, r]
                    aqr = A[q, r]
                    A[p, r] = c * apr - s * aqr
                    A[q, r] = s * apr + c * aqr
                A[p, q] = 0.0
                A[q, p] = 0.0
                for r in range(n):
                    vrp = V[r, p]
                    vrq = V[r, q]
                    V[r, p] = c * vrp - s * vrq
                    V[r, q] = s * vrp + c * vrq
    lam = np.zeros(n)
    for i in range(n):
        lam[i] = A[i, i]
    order = np.argsort(lam)
    lo = np.zeros(n)
    Vo = np.zeros((n, n))
    for ii in range(n):
        lo[ii] = lam[order[ii]]
        for r in range(n):
            Vo[r, ii] = V[r, order[ii]]
    return lo, Vo


def symmetric_spectrum(A, check=True):
    """Eigenvalues ascending and orthonormal eigenvectors (as columns)."""
    A = _square(A)
    if check:
        nrm = np.linalg.norm(A)
        if np.linalg.norm(A - A.T) > 1e-10 * max(nrm, np.finfo(float).tiny):
            raise PreconditionError("matrix is not symmetric")
    A = np.ascontiguousarray(0.5 * (A + A.T))
    if use_numba():
        return _jacobi_eigh(A, 100)
    lam, V = np.linalg.eigh(A)
    return lam, V


def singular_values(M):
    M = np.asarray(M, dtype=float)
    if use_numba():
        return jacobi_svd(M)[1]
    return np.linalg.svd(M, compute_uv=False)


def eps_rank(sigma, tau=DEFAULT_TAU, scale=None):
    """Number of singular values strictly above ``tau * sigma_max``.

    With ``scale`` the reference is ``max(sigma_max, scale)``, so a matrix
    that is round-off relative to ``scale`` has rank 0.
    """
    sigma = np.abs(np.asarray(sigma, dtype=float))
    if sigma.size == 0:
        return 0
    top = sigma.max() if scale is None else max(sigma.max(), float(scale))
    if top == 0.0:
        return 0
    return int(np.count_nonzero(sigma > tau * top))


@dataclass(frozen=True)
class ProjectionPair:
    proj_range: np.ndarray
    proj_null: np.ndarray
    eps_rank: int
    sigma: np.ndarray


def projections(M, tau=DEFAULT_TAU, scale=None):
    """Orthogonal projections onto ``range(M)`` and ``null(M^T)``.

    The range is the span of left singular vectors with ``sigma > tau *
    sigma_1``. A zero matrix is legitimate (conformal points) and yields
    rank 0 with ``proj_null = I``; ``scale`` is passed to :func:`eps_rank`.
    """
    if not 0.0 < tau < 1.0:
        raise PreconditionError(f"tau must lie in (0, 1), got {tau}")
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ShapeError("expected a matrix")
    N = M.shape[0]
    if use_numba():
        U, s, _ = jacobi_svd(M)
    else:
        U, s, _ = np.linalg.svd(M, full_matrices=False)
    r = eps_rank(s, tau, scale)
    if r == N:
        # exact at the extremes so that no round-off leaks into the complement
        return ProjectionPair(np.eye(N), np.zeros((N, N)), r, np.asarray(s))
    Ur = U[:, :r]
    Pr = Ur @ Ur.T
    Pr = 0.5 * (Pr + Pr.T)
    return ProjectionPair(Pr, np.eye(N) - Pr, r, np.asarray(s))
