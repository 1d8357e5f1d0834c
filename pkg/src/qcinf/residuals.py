"""Pointwise residuals of the p- and infinity-systems for the dilation.

All evaluators take a :class:`Jet2` (value, gradient ``du[a, i]`` and Hessian
``d2u[a, i, j]``) and return vectors in the target space ``R^N`` unless
stated otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dilation import (
    dilation,
    dilation_gradient,
    dilation_hessian_fd,
    dilation_hessian_reduced,
    fd_step_first,
    kp_projections,
)
from .errors import PreconditionError, ShapeError
from .tensor import DEFAULT_TAU, ahlfors, projections


@dataclass(frozen=True)
class Jet2:
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    d2u: np.ndarray
    provenance: str = "exact"

    def __post_init__(self):
        du = np.asarray(self.du, dtype=float)
        d2u = np.asarray(self.d2u, dtype=float)
        if du.ndim != 2 or d2u.shape != du.shape + (du.shape[1],):
            raise ShapeError(f"inconsistent jet shapes {du.shape} and {d2u.shape}")
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "d2u", d2u)

    @property
    def n(self) -> int:
        return self.du.shape[1]

    @property
    def N(self) -> int:
        return self.du.shape[0]

    def symmetry_defect(self) -> float:
        d = self.d2u
        return float(np.linalg.norm(d - d.transpose(0, 2, 1)) / max(1.0, np.linalg.norm(d)))


def hessian_contract(H, d2u):
    """``H : D2u`` for ``H[a, i, b, j]``, i.e. ``H_{a i b j} D2_{ij} u_b``."""
    return np.einsum("aibj,bij->a", H, d2u)


def dilation_derivative(j: Jet2):
    """``D(K(Du))`` by the chain rule, a vector in ``R^n``."""
    kp = dilation_gradient(j.du)
    return np.einsum("aj,aji->i", kp, j.d2u)


def tangential_residual(j: Jet2):
    """``K_P (x) K_P : D2u = K_P D(K(Du))``."""
    kp = dilation_gradient(j.du)
    return kp @ np.einsum("bj,bij->i", kp, j.d2u)


def normal_residual(j: Jet2, tau=DEFAULT_TAU):
    proj = kp_projections(j.du, tau).proj_null
    return proj @ hessian_contract(dilation_hessian_reduced(j.du), j.d2u)


@dataclass(frozen=True)
class ResidualBundle:
    tangential: np.ndarray
    normal: np.ndarray
    q_infinity: np.ndarray
    dilation_value: float
    normalization: str = "K"
    kp_rank: int = 0


def q_infinity_residual(j: Jet2, tau=DEFAULT_TAU, normalization="K") -> ResidualBundle:
    """Tangential and normal parts plus their sum.

    ``normalization="K"`` weights the normal part by ``K(Du)``; ``"unit"``
    drops that (strictly positive) factor.
    """
    if normalization not in ("K", "unit"):
        raise PreconditionError(f"unknown normalization {normalization!r}")
    k = dilation(j.du)
    kp = dilation_gradient(j.du)
    pair = kp_projections(j.du, tau)
    tang = kp @ np.einsum("bj,bij->i", kp, j.d2u)
    normal = pair.proj_null @ hessian_contract(dilation_hessian_reduced(j.du), j.d2u)
    weight = k if normalization == "K" else 1.0
    return ResidualBundle(tang, normal, tang + weight * normal, k, normalization, pair.eps_rank)


def q_p_log_scaled(j: Jet2, p: float):
    """``(r, log c)`` with ``Q_p = c * r`` and ``c = (p-1) K^(p-2)``.

    ``r = K_P D(K(Du)) + K/(p-1) K_PP : D2u`` uses the full Hessian of ``K``
    (finite differences), since no projection is applied here.
    """
    if p < 2:
        raise PreconditionError("p must be at least 2")
    k = dilation(j.du)
    full = hessian_contract(dilation_hessian_fd(j.du), j.d2u)
    r = tangential_residual(j) + (k / (p - 1.0)) * full
    return r, math.log(p - 1.0) + (p - 2.0) * math.log(k)


def q_p_expanded(j: Jet2, p: float, rescaled=False):
    """Expanded p-system ``(p-1)K^(p-2) K_P(x)K_P:D2u + K^(p-1) K_PP:D2u``.

    With ``rescaled=True`` the result is divided by ``(p-1)K^(p-2)``.
    """
    r, logc = q_p_log_scaled(j, p)
    if rescaled:
        return r
    if logc > 700.0:
        raise OverflowError(f"(p-1)K^(p-2) = exp({logc:.1f}) overflows; use rescaled=True")
    return math.exp(logc) * r


def infinity_laplacian_residual(j: Jet2, tau=DEFAULT_TAU):
    """``(Du (x) Du + |Du|^2 [Du]^perp (x) I) : D2u``."""
    du = j.du
    along = du @ np.einsum("bj,bij->i", du, j.d2u)
    lap = np.einsum("aii->a", j.d2u)
    perp = projections(du, tau).proj_null
    return along + float(np.sum(du * du)) * (perp @ lap)


@dataclass(frozen=True)
class Hamiltonian:
    """A function of the gradient with its first derivative."""

    value: Callable
    grad: Callable
    name: str = "H"
    hessian: Callable | None = field(default=None)

    def hess(self, P):
        if self.hessian is not None:
            return self.hessian(P)
        # central differences of the gradient
        P = np.asarray(P, dtype=float)
        h = fd_step_first(P)
        N, n = P.shape
        H = np.empty((N, n, N, n))
        E = np.zeros_like(P)
        for a, i in np.ndindex(N, n):
            E[a, i] = h
            H[:, :, a, i] = (self.grad(P + E) - self.grad(P - E)) / (2.0 * h)
            E[a, i] = 0.0
        return 0.5 * (H + H.transpose(2, 3, 0, 1))


DILATION_H = Hamiltonian(dilation, dilation_gradient, "K")
DIRICHLET_H = Hamiltonian(lambda P: float(np.sum(np.asarray(P) ** 2)), lambda P: 2.0 * np.asarray(P, float), "|P|^2")


def constant_hamiltonian(c=1.0) -> Hamiltonian:
    return Hamiltonian(lambda P: float(c), lambda P: np.zeros_like(np.asarray(P, float)), "const")


def a_infinity_residual(j: Jet2, H: Hamiltonian, tau=DEFAULT_TAU):
    """``(H_P (x) H_P + H [H_P]^perp H_PP)(Du) : D2u``."""
    hp = np.asarray(H.grad(j.du), dtype=float)
    along = hp @ np.einsum("bj,bij->i", hp, j.d2u)
    if not np.any(hp):
        return along
    perp = projections(hp, tau).proj_null
    return along + H.value(j.du) * (perp @ hessian_contract(H.hess(j.du), j.d2u))


def geometric_tangential(j: Jet2):
    """``S(g) D(K(Du))`` with ``g = Du^T Du``, a vector in ``R^n``."""
    g = j.du.T @ j.du
    return ahlfors(g) @ dilation_derivative(j)


def second_fundamental_contraction(nu, dnu, j: Jet2, check=True):
    """``D nu : K_P(Du)`` for a section ``nu`` normal to ``K_P(Du)``.

    ``dnu[a, i]`` is the derivative of ``nu_a`` along ``x_i``. For a section
    that stays normal, this equals ``-nu^T K_PP(Du) : D2u``
    (see :func:`normal_section_rhs`).
    """
    nu = np.asarray(nu, dtype=float)
    dnu = np.asarray(dnu, dtype=float)
    kp = dilation_gradient(j.du)
    if check:
        lhs = nu @ kp
        if np.linalg.norm(lhs) > 1e-8 * max(1.0, np.linalg.norm(nu) * np.linalg.norm(kp)):
            raise PreconditionError("nu is not normal to K_P(Du)")
    return float(np.sum(dnu * kp))


def normal_section_rhs(nu, j: Jet2) -> float:
    """``-nu^T K_PP(Du) : D2u``; the reduced Hessian suffices for normal ``nu``."""
    return -float(np.asarray(nu, float) @ hessian_contract(dilation_hessian_reduced(j.du), j.d2u))


def fd_dilation_derivative(value_fn, x, h=1e-5):
    """``D(K(Du))`` by central differences of ``x -> K(Du(x))`` (oracle helper)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = h
        out[i] = (value_fn(x + e) - value_fn(x - e)) / (2.0 * h)
        e[i] = 0.0
    return out


__all__ = [
    "Jet2", "ResidualBundle", "Hamiltonian", "DILATION_H", "DIRICHLET_H", "constant_hamiltonian",
    "tangential_residual", "normal_residual", "q_infinity_residual", "q_p_expanded",
    "q_p_log_scaled", "infinity_laplacian_residual", "a_infinity_residual", "geometric_tangential",
    "second_fundamental_contraction", "normal_section_rhs", "dilation_derivative",
    "hessian_contract", "fd_dilation_derivative",
]
