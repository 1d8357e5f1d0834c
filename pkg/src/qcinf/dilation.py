"""The dilation function ``K(P) = |P|^2 / det(P^T P)^(1/n)`` and its derivatives.

Matrices ``P`` are ``N x n`` (rows index the target, columns the domain).
Second derivatives are stored as 4-tensors ``H[a, i, b, j] = d2K / dP_ai dP_bj``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainViolation, PreconditionError, ShapeError
from .tensor import DEFAULT_TAU, ahlfors, projections

EPS = np.finfo(float).eps
DET_FLOOR = 1e-14


def _as_matrix(P):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise ShapeError(f"expected an N x n matrix, got shape {P.shape}")
    return P


def _gram(P):
    """Return ``(g, det g, |P|^2)`` after checking membership of S+."""
    n = P.shape[1]
    g = P.T @ P
    det = np.linalg.det(g)
    sq = float(np.sum(P * P))
    if not np.isfinite(det) or det <= DET_FLOOR * sq ** n:
        raise DomainViolation(f"det(P^T P) = {det:.3e} is at or below the S+ floor")
    return g, det, sq


def in_s_plus(P) -> bool:
    try:
        _gram(_as_matrix(P))
    except DomainViolation:
        return False
    return True


def dilation(P) -> float:
    P = _as_matrix(P)
    _, det, sq = _gram(P)
    return sq / det ** (1.0 / P.shape[1])


def dilation_gradient(P):
    """``K_P = 2 P g^{-1} S(g) / det(g)^(1/n)`` with ``g = P^T P``."""
    P = _as_matrix(P)
    n = P.shape[1]
    g, det, _ = _gram(P)
    return 2.0 * P @ np.linalg.solve(g, ahlfors(g)) / det ** (1.0 / n)


def e_tensor(n: int):
    """Constant tensor ``E_kjlm = d_ml d_jk + d_mj d_kl - (2/n) d_mk d_jl``."""
    if n < 1:
        raise PreconditionError("n must be positive")
    d = np.eye(n)
    return (np.einsum("ml,jk->kjlm", d, d)
            + np.einsum("mj,kl->kjlm", d, d)
            - (2.0 / n) * np.einsum("mk,jl->kjlm", d, d))


def dilation_hessian_reduced(P, E=None):
    """The two explicit summands of ``K_PP``.

    The remaining part of the full Hessian has the form ``K_P . A`` and is
    removed by the projection onto ``null(K_P^T)``, so this tensor agrees
    with the full Hessian after that projection. ``E`` overrides the
    constant tensor (used by the mutation self-test).
    """
    P = _as_matrix(P)
    N, n = P.shape
    g, det, sq = _gram(P)
    w = np.linalg.inv(g)
    scale = 2.0 / det ** (1.0 / n)
    first = np.einsum("ab,ij->aibj", np.eye(N), w @ (g - (sq / n) * np.eye(n)))
    second = np.einsum("am,bl,ik,kjlm->aibj", P, P, w, e_tensor(n) if E is None else E)
    return scale * (first + second)


def kp_scale(P) -> float:
    """Natural size of ``K_P`` at ``P`` (it is homogeneous of degree -1)."""
    P = _as_matrix(P)
    return dilation(P) / float(np.linalg.norm(P))


def kp_projections(P, tau=DEFAULT_TAU):
    """Range / null-complement projections of ``K_P(P)``, ranked against :func:`kp_scale`."""
    return projections(dilation_gradient(P), tau, kp_scale(P))


def fd_step_first(P):
    return EPS ** (1.0 / 3.0) * max(1.0, float(np.linalg.norm(P)))


def fd_step_second(P):
    return EPS ** 0.25 * max(1.0, float(np.linalg.norm(P)))


def dilation_gradient_fd(P, h=None, func=None):
    """Central differences of ``func`` (default :func:`dilation`)."""
    P = _as_matrix(P)
    f = dilation if func is None else func
    h = fd_step_first(P) if h is None else h
    G = np.empty_like(P)
    E = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        E[idx] = h
        G[idx] = (f(P + E) - f(P - E)) / (2.0 * h)
        E[idx] = 0.0
    return G


def dilation_hessian_fd(P, h=None, func=None, richardson=True):
    """Full Hessian of ``func`` (default :func:`dilation`) by central differences.

    Diagonal entries use the 3-point stencil, mixed ones the 4-point stencil,
    so the result is exactly symmetric under ``(a,i) <-> (b,j)``. With
    ``richardson`` the steps ``h`` and ``h/2`` are combined to cancel the
    leading ``O(h^2)`` term.
    """
    P = _as_matrix(P)
    h = fd_step_second(P) if h is None else h
    H = _hessian_fd_once(P, h, func)
    if richardson:
        H = (4.0 * _hessian_fd_once(P, 0.5 * h, func) - H) / 3.0
    return H


def _hessian_fd_once(P, h, func):
    f = dilation if func is None else func
    N, n = P.shape
    m = N * n
    x = P.ravel()

    def ev(dx):
        try:
            return f((x + dx).reshape(N, n))
        except DomainViolation as exc:
            raise DomainViolation("finite-difference stencil left S+", where=dx) from exc

    f0 = ev(np.zeros(m))
    H = np.empty((m, m))
    ei = np.zeros(m)
    ej = np.zeros(m)
    for i in range(m):
        ei[i] = h
        H[i, i] = (ev(ei) - 2.0 * f0 + ev(-ei)) / (h * h)
        for j in range(i + 1, m):
            ej[j] = h
            val = (ev(ei + ej) - ev(ei - ej) - ev(-ei + ej) + ev(-ei - ej)) / (4.0 * h * h)
            H[i, j] = H[j, i] = val
            ej[j] = 0.0
        ei[i] = 0.0
    return H.reshape(N, n, N, n)


def identity_n_equals_N(P) -> float:
    """Relative residual of ``K_P = -(2K/n)(P^{-T} - n P/|P|^2)`` for square ``P``."""
    P = _as_matrix(P)
    N, n = P.shape
    if N != n:
        raise ShapeError("the identity needs a square gradient")
    if abs(np.linalg.det(P)) <= DET_FLOOR * np.linalg.norm(P) ** n:
        raise DomainViolation("singular gradient")
    lhs = dilation_gradient(P)
    k = dilation(P)
    rhs = -(2.0 * k / n) * (np.linalg.inv(P).T - n * P / np.sum(P * P))
    return float(np.linalg.norm(lhs - rhs) / max(1.0, np.linalg.norm(lhs)))


@dataclass(frozen=True)
class DilationJet:
    k: float
    k_p: np.ndarray
    k_pp_reduced: np.ndarray


def dilation_jet(P) -> DilationJet:
    return DilationJet(dilation(P), dilation_gradient(P), dilation_hessian_reduced(P))
