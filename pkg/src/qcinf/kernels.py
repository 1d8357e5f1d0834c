"""Batched per-point kernels used by grid sweeps and the solver.

Each public function takes stacked matrices ``P[m, a, i]`` and dispatches to
a loop kernel (numba) or its vectorised numpy twin depending on
:func:`qcinf._accel.use_numba`. Both paths return identical quantities up
to round-off.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, use_numba
from .dilation import DET_FLOOR
from .tensor import _jacobi_eigh


@njit
def _gauss_jordan(g, w):
    # inverse of a small SPD matrix into w, returns det
    n = g.shape[0]
    a = g.copy()
    for i in range(n):
        for j in range(n):
            w[i, j] = 1.0 if i == j else 0.0
    det = 1.0
    for c in range(n):
        piv = c
        best = abs(a[c, c])
        for r in range(c + 1, n):
            if abs(a[r, c]) > best:
                best = abs(a[r, c])
                piv = r
        if best == 0.0:
            return 0.0
        if piv != c:
            det = -det
            for k in range(n):
                tmp = a[c, k]
                a[c, k] = a[piv, k]
                a[piv, k] = tmp
                tmp = w[c, k]
                w[c, k] = w[piv, k]
                w[piv, k] = tmp
        d = a[c, c]
        det *= d
        for k in range(n):
            a[c, k] /= d
            w[c, k] /= d
        for r in range(n):
            if r != c:
                f = a[r, c]
                if f != 0.0:
                    for k in range(n):
                        a[r, k] -= f * a[c, k]
                        w[r, k] -= f * w[c, k]
    return det


@njit
def _dilation_grad_nb(P, want_grad):
    m, N, n = P.shape
    K = np.empty(m)
    KP = np.zeros((m, N, n))
    ok = np.ones(m, dtype=np.bool_)
    g = np.empty((n, n))
    w = np.empty((n, n))
    for t in range(m):
        sq = 0.0
        for i in range(n):
            for j in range(n):
                s = 0.0
                for a in range(N):
                    s += P[t, a, i] * P[t, a, j]
                g[i, j] = s
            sq += g[i, i]
        det = _gauss_jordan(g, w)
        if not (det > DET_FLOOR * sq ** n) or not np.isfinite(det):
            K[t] = np.inf
            ok[t] = False
            continue
        root = det ** (1.0 / n)
        K[t] = sq / root
        if want_grad:
            c = 2.0 / root
            cw = sq / n
            for a in range(N):
                for i in range(n):
                    pw = 0.0
                    for k in range(n):
                        pw += P[t, a, k] * w[k, i]
                    KP[t, a, i] = c * (P[t, a, i] - cw * pw)
    return K, KP, ok


def _dilation_grad_np(P, want_grad):
    m, N, n = P.shape
    g = np.einsum("mai,maj->mij", P, P)
    sq = np.einsum("mii->m", g)
    det = np.linalg.det(g)
    with np.errstate(invalid="ignore", over="ignore"):
        ok = np.isfinite(det) & (det > DET_FLOOR * sq ** n)
    K = np.full(m, np.inf)
    KP = np.zeros((m, N, n))
    if np.any(ok):
        root = det[ok] ** (1.0 / n)
        K[ok] = sq[ok] / root
        if want_grad:
            w = np.linalg.inv(g[ok])
            pw = np.einsum("mak,mki->mai", P[ok], w)
            KP[ok] = (2.0 / root)[:, None, None] * (P[ok] - (sq[ok] / n)[:, None, None] * pw)
    return K, KP, ok


def dilation_batch(P):
    """``K`` at every stacked matrix; ``inf`` and ``ok=False`` outside S+."""
    P = np.ascontiguousarray(P, dtype=float)
    if use_numba():
        K, _, ok = _dilation_grad_nb(P, False)
    else:
        K, _, ok = _dilation_grad_np(P, False)
    return K, ok


def dilation_grad_batch(P):
    P = np.ascontiguousarray(P, dtype=float)
    if use_numba():
        return _dilation_grad_nb(P, True)
    return _dilation_grad_np(P, True)


@njit
def _ahlfors_gram_eig_nb(P):
    m, N, n = P.shape
    lam = np.empty((m, n))
    scale = np.empty(m)
    g = np.empty((n, n))
    for t in range(m):
        tr = 0.0
        for i in range(n):
            for j in range(n):
                s = 0.0
                for a in range(N):
                    s += P[t, a, i] * P[t, a, j]
                g[i, j] = s
            tr += g[i, i]
        nrm = 0.0
        for i in range(n):
            for j in range(n):
                nrm += g[i, j] * g[i, j]
        scale[t] = np.sqrt(nrm)
        for i in range(n):
            g[i, i] -= tr / n
        ev, _ = _jacobi_eigh(g, 100)
        for i in range(n):
            lam[t, i] = ev[i]
    return lam, scale


def ahlfors_gram_spectrum_batch(P):
    """Ascending eigenvalues of ``S(P^T P)`` and ``|P^T P|`` per matrix."""
    P = np.ascontiguousarray(P, dtype=float)
    if use_numba():
        return _ahlfors_gram_eig_nb(P)
    n = P.shape[2]
    g = np.einsum("mai,maj->mij", P, P)
    scale = np.sqrt(np.einsum("mij,mij->m", g, g))
    tr = np.einsum("mii->m", g)
    s = g - (tr / n)[:, None, None] * np.eye(n)
    return np.linalg.eigvalsh(s), scale
