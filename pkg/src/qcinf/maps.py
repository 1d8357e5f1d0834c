"""Closed-form maps with exact 2-jets.

Each map is registered under a name with a parameter record; ``get_map``
builds one, ``list_maps`` enumerates the catalog. Jets are hand-derived and
cross-checked against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainViolation
from .residuals import Jet2


@dataclass(frozen=True)
class AnalyticMap:
    name: str
    n: int
    N: int
    value_fn: Callable
    jet_fn: Callable
    params: dict = field(default_factory=dict)
    domain: Callable | None = None
    domain_text: str = "R^n"
    box: tuple = ()
    conformal: bool = False
    grad_fn: Callable | None = None   # vectorised (m, n) -> (m, N, n)
    punctures: tuple = ()             # isolated points excluded from the domain

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return True if self.domain is None else bool(self.domain(x))

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ConfigurationError(f"{self.name} expects points in R^{self.n}")
        if not self.contains(x):
            raise DomainViolation(f"{x} lies outside the domain of {self.name} ({self.domain_text})", where=x)
        return x

    def value(self, x):
        return np.asarray(self.value_fn(self._check(x)), dtype=float)

    def jet(self, x) -> Jet2:
        x = self._check(x)
        u, du, d2u = self.jet_fn(x)
        return Jet2(x, u, du, d2u, provenance=f"exact:{self.name}")

    def gradients(self, points):
        """``Du`` at an ``(m, n)`` array of points (no domain check)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.n)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(pts), dtype=float)
        return np.array([self.jet_fn(p)[1] for p in pts]).reshape(len(pts), self.N, self.n)

    def dist_to_boundary(self, x) -> float:
        """Distance from ``x`` to the edge of the box and to any puncture."""
        x = np.asarray(x, dtype=float)
        d = np.inf
        if self.box:
            box = np.asarray(self.box, dtype=float)
            d = float(min(np.min(x - box[:, 0]), np.min(box[:, 1] - x)))
        for q in self.punctures:
            d = min(d, float(np.linalg.norm(x - np.asarray(q, dtype=float))))
        return d

    def sample(self, points):
        """Values at an ``(m, n)`` array of points."""
        return np.array([self.value(p) for p in np.asarray(points, dtype=float)])


def _nonzero(x):
    return float(np.dot(x, x)) > 0.0


# --- individual maps ----------------------------------------------------------

def _power_jet(gamma):
    def value(x):
        return np.dot(x, x) ** (0.5 * gamma) * x

    def jet(x):
        n = x.size
        r2 = float(np.dot(x, x))
        r = np.sqrt(r2)
        I = np.eye(n)
        rg = r ** gamma
        du = rg * (I + gamma * np.outer(x, x) / r2)
        c1 = gamma * r ** (gamma - 2.0)
        c2 = gamma * (gamma - 2.0) * r ** (gamma - 4.0)
        d2u = c1 * (np.einsum("ai,j->aij", I, x) + np.einsum("aj,i->aij", I, x) + np.einsum("ij,a->aij", I, x))
        d2u += c2 * np.einsum("a,i,j->aij", x, x, x)
        return value(x), du, d2u

    return value, jet


def power_map(gamma=1.0, n=2) -> AnalyticMap:
    """``x -> |x|^gamma x`` on the punctured space, ``gamma > -1``."""
    gamma = float(gamma)
    if not gamma > -1.0:
        raise ConfigurationError("power map needs gamma > -1")
    v, j = _power_jet(gamma)

    def grads(x):
        r2 = np.einsum("mi,mi->m", x, x)
        rg = r2 ** (0.5 * gamma)
        outer = np.einsum("ma,mi->mai", x, x) / r2[:, None, None]
        return rg[:, None, None] * (np.eye(n) + gamma * outer)

    return AnalyticMap("power", n, n, v, j, {"gamma": gamma}, _nonzero, "x != 0",
                       box=((-1.0, 1.0),) * n, conformal=(gamma == 0.0), grad_fn=grads,
                       punctures=(tuple([0.0] * n),))


def power_map_jet(x, gamma) -> Jet2:
    x = np.asarray(x, dtype=float)
    return power_map(gamma, x.size).jet(x)


def power_map_dilation(gamma) -> float:
    """Closed-form dilation of the planar power map, ``2 + gamma^2/(gamma+1)``."""
    return 2.0 + gamma * gamma / (gamma + 1.0)


def complex_exp_map() -> AnalyticMap:
    """``(x, y) -> e^{ix} - e^{iy}`` as a map into R^2."""

    def value(p):
        x, y = p
        return np.array([np.cos(x) - np.cos(y), np.sin(x) - np.sin(y)])

    def jet(p):
        x, y = p
        du = np.array([[-np.sin(x), np.sin(y)], [np.cos(x), -np.cos(y)]])
        d2u = np.zeros((2, 2, 2))
        d2u[0, 0, 0] = -np.cos(x)
        d2u[0, 1, 1] = np.cos(y)
        d2u[1, 0, 0] = -np.sin(x)
        d2u[1, 1, 1] = np.sin(y)
        return value(p), du, d2u

    def grads(p):
        x, y = p[:, 0], p[:, 1]
        return np.stack([np.stack([-np.sin(x), np.sin(y)], -1), np.stack([np.cos(x), -np.cos(y)], -1)], 1)

    return AnalyticMap("complex-exp", 2, 2, value, jet, {}, box=((-0.3, 0.3),) * 2, grad_fn=grads)


def complex_exp_map_jet(x) -> Jet2:
    return complex_exp_map().jet(x)


def exp3d_map() -> AnalyticMap:
    """``(x, y, z) -> (e^x, sqrt2 y e^x, sqrt3 z e^x)``."""
    s2, s3 = np.sqrt(2.0), np.sqrt(3.0)

    def value(p):
        x, y, z = p
        e = np.exp(x)
        return np.array([e, s2 * y * e, s3 * z * e])

    def jet(p):
        x, y, z = p
        e = np.exp(x)
        du = e * np.array([[1.0, 0.0, 0.0], [s2 * y, s2, 0.0], [s3 * z, 0.0, s3]])
        d2u = np.zeros((3, 3, 3))
        d2u[0, 0, 0] = e
        d2u[1, 0, 0] = s2 * y * e
        d2u[1, 0, 1] = d2u[1, 1, 0] = s2 * e
        d2u[2, 0, 0] = s3 * z * e
        d2u[2, 0, 2] = d2u[2, 2, 0] = s3 * e
        return value(p), du, d2u

    def grads(p):
        e = np.exp(p[:, 0])
        out = np.zeros((len(p), 3, 3))
        out[:, 0, 0] = 1.0
        out[:, 1, 0] = s2 * p[:, 1]
        out[:, 1, 1] = s2
        out[:, 2, 0] = s3 * p[:, 2]
        out[:, 2, 2] = s3
        return e[:, None, None] * out

    return AnalyticMap("exp3d", 3, 3, value, jet, {}, box=((-0.5, 0.5),) * 3, grad_fn=grads)


def exp3d_map_jet(x) -> Jet2:
    return exp3d_map().jet(x)


def affine_map(A=None, b=None, n=2) -> AnalyticMap:
    A = np.eye(n) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    N, n = A.shape
    b = np.zeros(N) if b is None else np.asarray(b, dtype=float)

    def value(x):
        return A @ x + b

    def jet(x):
        return value(x), A.copy(), np.zeros((N, n, n))

    def grads(x):
        return np.broadcast_to(A, (len(x), N, n)).copy()

    conformal = np.allclose(A.T @ A, np.trace(A.T @ A) / n * np.eye(n))
    return AnalyticMap("affine", n, N, value, jet, {"A": A.tolist(), "b": b.tolist()},
                       box=((0.0, 1.0),) * n, conformal=bool(conformal), grad_fn=grads)


def identity_map(n=2) -> AnalyticMap:
    m = affine_map(np.eye(n), n=n)
    return AnalyticMap("identity", n, n, m.value_fn, m.jet_fn, {"n": n}, box=((0.0, 1.0),) * n, conformal=True,
                       grad_fn=m.grad_fn)


def rotation_map(theta=0.5, scale=1.0) -> AnalyticMap:
    c, s = np.cos(theta), np.sin(theta)
    A = scale * np.array([[c, -s], [s, c]])
    m = affine_map(A)
    name = "rotation" if scale == 1.0 else "scaled-rotation"
    return AnalyticMap(name, 2, 2, m.value_fn, m.jet_fn, {"theta": theta, "scale": scale},
                       box=((-1.0, 1.0),) * 2, conformal=True, grad_fn=m.grad_fn)


def inversion_map(n=2, r_in=0.5, r_out=2.0) -> AnalyticMap:
    """``x -> x/|x|^2`` on the annulus ``r_in < |x| < r_out``."""

    def value(x):
        return x / np.dot(x, x)

    def jet(x):
        nn = x.size
        r2 = float(np.dot(x, x))
        I = np.eye(nn)
        du = I / r2 - 2.0 * np.outer(x, x) / r2 ** 2
        d2u = (-2.0 / r2 ** 2) * (np.einsum("ai,j->aij", I, x) + np.einsum("aj,i->aij", I, x)
                                  + np.einsum("ij,a->aij", I, x))
        d2u += (8.0 / r2 ** 3) * np.einsum("a,i,j->aij", x, x, x)
        return value(x), du, d2u

    def grads(x):
        r2 = np.einsum("mi,mi->m", x, x)[:, None, None]
        return np.eye(n) / r2 - 2.0 * np.einsum("ma,mi->mai", x, x) / r2 ** 2

    def inside(x):
        r = np.sqrt(np.dot(x, x))
        return r_in < r < r_out

    return AnalyticMap("inversion", n, n, value, jet, {"r_in": r_in, "r_out": r_out}, inside,
                       f"{r_in} < |x| < {r_out}", box=((0.6, 1.4),) * n, conformal=True, grad_fn=grads,
                       punctures=(tuple([0.0] * n),))


def cubic_map() -> AnalyticMap:
    """``(x, y) -> (x^3, y)``; non-constant dilation, not a solution."""

    def value(p):
        return np.array([p[0] ** 3, p[1]])

    def jet(p):
        x = p[0]
        du = np.array([[3.0 * x * x, 0.0], [0.0, 1.0]])
        d2u = np.zeros((2, 2, 2))
        d2u[0, 0, 0] = 6.0 * x
        return value(p), du, d2u

    def grads(p):
        out = np.zeros((len(p), 2, 2))
        out[:, 0, 0] = 3.0 * p[:, 0] ** 2
        out[:, 1, 1] = 1.0
        return out

    return AnalyticMap("cubic-y", 2, 2, value, jet, {}, lambda p: p[0] != 0.0, "x != 0",
                       box=((1.0, 2.0), (1.0, 2.0)), grad_fn=grads)


def graph_map(a=0.0, b=0.0, c=0.0) -> AnalyticMap:
    """``(x, y) -> (x, y, (a x^2 + 2 b x y + c y^2)/2)`` in R^3.

    With ``a = b = c = 0`` this is the planar conformal embedding.
    """
    C = np.array([[a, b], [b, c]], dtype=float)

    def value(p):
        return np.array([p[0], p[1], 0.5 * p @ C @ p])

    def jet(p):
        du = np.array([[1.0, 0.0], [0.0, 1.0], list(C @ p)])
        d2u = np.zeros((3, 2, 2))
        d2u[2] = C
        return value(p), du, d2u

    def grads(p):
        out = np.zeros((len(p), 3, 2))
        out[:, 0, 0] = out[:, 1, 1] = 1.0
        out[:, 2] = p @ C
        return out

    conformal = a == b == c == 0.0
    return AnalyticMap("graph", 2, 3, value, jet, {"a": a, "b": b, "c": c},
                       box=((-0.5, 0.5),) * 2, conformal=conformal, grad_fn=grads)


_FACTORIES = {
    "identity": (identity_map, "identity of R^n (params: n)"),
    "affine": (affine_map, "x -> A x + b (params: A, b)"),
    "rotation": (rotation_map, "planar rotation (params: theta)"),
    "scaled-rotation": (lambda theta=0.5, scale=2.0: rotation_map(theta, scale), "lambda R (params: theta, scale)"),
    "inversion": (inversion_map, "x -> x/|x|^2 on an annulus (params: n, r_in, r_out)"),
    "power": (power_map, "x -> |x|^gamma x (params: gamma, n)"),
    "complex-exp": (complex_exp_map, "(x,y) -> e^{ix} - e^{iy}"),
    "exp3d": (exp3d_map, "(x,y,z) -> (e^x, sqrt2 y e^x, sqrt3 z e^x)"),
    "cubic-y": (cubic_map, "(x,y) -> (x^3, y)"),
    "graph": (graph_map, "(x,y) -> (x, y, quadratic) in R^3 (params: a, b, c)"),
}

CONFORMAL_NAMES = ("identity", "rotation", "scaled-rotation", "inversion")


def list_maps():
    return [(name, text) for name, (_, text) in _FACTORIES.items()]


def get_map(name: str, **params) -> AnalyticMap:
    try:
        factory = _FACTORIES[name][0]
    except KeyError:
        raise ConfigurationError(f"unknown map {name!r}; known: {', '.join(_FACTORIES)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name}: {exc}") from None


def conformal_catalog(name: str, **params) -> AnalyticMap:
    if name not in CONFORMAL_NAMES:
        raise ConfigurationError(f"{name!r} is not in the conformal catalog {CONFORMAL_NAMES}")
    return get_map(name, **params)


def parse_params(text: str | None) -> dict:
    """``"gamma=1,n=2"`` -> ``{"gamma": 1.0, "n": 2}``."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigurationError(f"parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        v = v.strip()
        try:
            out[k.strip()] = int(v)
        except ValueError:
            try:
                out[k.strip()] = float(v)
            except ValueError as exc:
                raise ConfigurationError(f"parameter {k} has non-numeric value {v!r}") from exc
    return out


def fd_jet(m: AnalyticMap, x, h=1e-4) -> Jet2:
    """Jet from central differences of the value map (verification oracle)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    u0 = m.value(x)
    du = np.empty((u0.size, n))
    d2u = np.empty((u0.size, n, n))
    e = np.eye(n) * h
    for i in range(n):
        up, um = m.value(x + e[i]), m.value(x - e[i])
        du[:, i] = (up - um) / (2 * h)
        d2u[:, i, i] = (up - 2 * u0 + um) / (h * h)
        for j in range(i + 1, n):
            d2u[:, i, j] = d2u[:, j, i] = (m.value(x + e[i] + e[j]) - m.value(x + e[i] - e[j])
                                           - m.value(x - e[i] + e[j]) + m.value(x - e[i] - e[j])) / (4 * h * h)
    return Jet2(x, u0, du, d2u, provenance=f"fd:{m.name}")
