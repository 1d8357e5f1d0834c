"""Discrete ``L^p`` dilation minimisation with continuation in ``p``.

The energy of a nodal field is ``E_p = (mean_c K(G_c)^p)^(1/p)`` where
``G_c`` is the multilinear-element gradient at the centre of each active
cell. Dirichlet nodes are held fixed; the remaining nodes are optimised by
limited-memory quasi-Newton directions with Armijo backtracking. Gradients
leaving S+ make the energy ``+inf`` so the line search backs off.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, InitializationError, SolverStall
from .grid import Grid, MapField, cell_gradients, cell_gradients_adjoint, load_field, sample_map
from .kernels import dilation_batch, dilation_grad_batch
from .maps import get_map

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1


@dataclass
class SolveConfig:
    extents: list = field(default_factory=lambda: [[0.0, 1.0], [0.0, 1.0]])
    resolution: list = field(default_factory=lambda: [33, 33])
    boundary: dict = field(default_factory=lambda: {"map": "identity", "params": {}})
    mask: dict | None = None
    p_schedule: list = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    max_iter: int = 500
    tol: float = 1e-6
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    memory: int = 10
    restarts: int = 0
    jitter: float = 1e-2
    seed: int = 0
    selftest: int = 20
    threads: int | None = None

    def __post_init__(self):
        ps = [float(p) for p in self.p_schedule]
        if not ps or any(b <= a for a, b in zip(ps, ps[1:])):
            raise ConfigurationError("p schedule must be non-empty and strictly increasing")
        if ps[0] < 2 or ps[-1] < 2:
            raise ConfigurationError("p values must be >= 2")
        if self.tol <= 0 or self.c1 <= 0 or not 0 < self.backtrack < 1 or self.max_iter < 1:
            raise ConfigurationError("tolerances must be positive and backtrack in (0, 1)")
        self.p_schedule = ps

    @classmethod
    def from_dict(cls, doc: dict) -> "SolveConfig":
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigurationError(f"unsupported config schema {schema!r}")
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "SolveConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d


@dataclass
class StageReport:
    p: float
    energy: float
    sup_k: float
    var_k: float
    residual: float
    iterations: int
    converged: bool
    wall_time: float
    start_sup_k: float
    energy_monotone: bool


@dataclass
class SolveResult:
    field: MapField
    stages: list
    gradient_check: float | None = None
    restarts: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages], "gradient_check": self.gradient_check,
                "restarts": self.restarts}


# --- energy --------------------------------------------------------------------------

def _cell_mask_from(cfg: SolveConfig, grid: Grid):
    if not cfg.mask:
        return None
    kind = cfg.mask.get("type")
    if kind == "square-annulus":
        r = float(cfg.mask.get("inner", 0.25))
        c = grid.cell_centres()
        return ~np.all(np.abs(c) < r, axis=-1)
    if kind == "annulus":
        r0, r1 = float(cfg.mask.get("inner", 0.25)), float(cfg.mask.get("outer", 1.0))
        rr = np.linalg.norm(grid.cell_centres(), axis=-1)
        return (rr > r0) & (rr < r1)
    raise ConfigurationError(f"unknown mask type {kind!r}")


def energy(field: MapField, p, values=None):
    G = cell_gradients(field.values if values is None else values, field.grid.spacing)
    K, ok = dilation_batch(G[field.cell_mask])
    if not ok.all():
        return np.inf
    kmax = K.max()
    return float(kmax * np.mean((K / kmax) ** p) ** (1.0 / p))


def energy_and_gradient(field: MapField, p, values=None):
    """Normalised energy and its exact gradient w.r.t. nodal values.

    The gradient is zero on fixed nodes. Outside S+ the energy is ``inf``
    and the gradient ``None``; the offending cell is available through
    :func:`first_bad_cell`.
    """
    vals = field.values if values is None else values
    sp = field.grid.spacing
    G = cell_gradients(vals, sp)
    active = field.cell_mask
    K, KP, ok = dilation_grad_batch(G[active])
    if not ok.all():
        return np.inf, None
    kmax = K.max()
    rel = K / kmax
    M = K.size
    E = kmax * np.mean(rel ** p) ** (1.0 / p)
    w = (K / E) ** (p - 1.0) / M
    cot = np.zeros(G.shape)
    cot[active] = w[:, None, None] * KP
    grad = cell_gradients_adjoint(cot, sp, field.grid.shape)
    grad[field.fixed] = 0.0
    return float(E), grad


def first_bad_cell(field: MapField, values=None):
    G = cell_gradients(field.values if values is None else values, field.grid.spacing)
    idx = np.nonzero(field.cell_mask)
    _, ok = dilation_batch(G[idx])
    if ok.all():
        return None
    t = int(np.argmin(ok))
    return tuple(int(i[t]) for i in idx)


def scaled_residual(field: MapField, grad, p) -> float:
    """Rescaled discrete p-system residual, ``max |M grad| / (p - 1)`` over free nodes."""
    M = int(field.cell_mask.sum())
    free = ~field.fixed & field.node_mask()
    if not free.any():
        return 0.0
    return float(np.max(np.abs(grad[free])) * M / (p - 1.0))


def gradient_check(field: MapField, p, rng, t=1e-5, samples=1):
    """Max relative gap between ``<grad, d>`` and a central difference of the energy."""
    _, grad = energy_and_gradient(field, p)
    free = ~field.fixed & field.node_mask()
    worst = 0.0
    for _ in range(samples):
        d = np.zeros(field.values.shape)
        d[free] = rng.standard_normal((int(free.sum()), field.N))
        # unit change in cell gradients per unit t
        d *= min(field.grid.spacing) / np.max(np.abs(d))
        ep = energy(field, p, field.values + t * d)
        em = energy(field, p, field.values - t * d)
        fd = (ep - em) / (2.0 * t)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    return worst


def selftest(field: MapField, ps, rng, states=20, scale=0.02):
    """Gradient check at ``states`` jittered copies of ``field``, cycling through ``ps``."""
    free = ~field.fixed & field.node_mask()
    h = min(field.grid.spacing)
    worst = 0.0
    for s in range(states):
        v = np.array(field.values)
        v[free] += scale * h * rng.standard_normal((int(free.sum()), field.N))
        worst = max(worst, gradient_check(field.with_values(v), ps[s % len(ps)], rng))
    return worst


# --- initialisation ------------------------------------------------------------------

def harmonic_extension(field: MapField) -> MapField:
    """Replace free nodes by the discrete harmonic extension of the fixed ones."""
    g = field.grid
    free = ~field.fixed & field.node_mask()
    if not free.any():
        return field
    ids = -np.ones(g.shape, dtype=int)
    ids[free] = np.arange(int(free.sum()))
    rows, cols, data = [], [], []
    rhs = np.zeros((int(free.sum()), field.N))
    vals = field.values
    for idx in zip(*np.nonzero(free)):
        r = ids[idx]
        diag = 0.0
        for k, h in enumerate(g.spacing):
            w = 1.0 / (h * h)
            diag += 2.0 * w
            for s in (-1, 1):
                nb = list(idx)
                nb[k] += s
                nb = tuple(nb)
                if ids[nb] >= 0:
                    rows.append(r)
                    cols.append(ids[nb])
                    data.append(-w)
                else:
                    rhs[r] += w * vals[nb]
        rows.append(r)
        cols.append(r)
        data.append(diag)
    A = sparse.csr_matrix((data, (rows, cols)), shape=(len(rhs), len(rhs)))
    sol = spsolve(A.tocsc(), rhs)
    out = np.array(vals)
    out[free] = sol.reshape(len(rhs), field.N)
    return field.with_values(out, provenance="harmonic")


def affine_fit(field: MapField) -> MapField:
    """Least-squares affine map through the fixed nodes, evaluated on free nodes."""
    pts = field.grid.points()
    fx = field.fixed & field.node_mask()
    X = np.hstack([pts[fx], np.ones((int(fx.sum()), 1))])
    coef, *_ = np.linalg.lstsq(X, field.values[fx], rcond=None)
    out = np.array(field.values)
    free = ~field.fixed & field.node_mask()
    out[free] = np.hstack([pts[free], np.ones((int(free.sum()), 1))]) @ coef
    return field.with_values(out, provenance="affine-fit")


def initial_field(cfg: SolveConfig) -> MapField:
    grid = Grid(tuple(tuple(e) for e in cfg.extents), tuple(cfg.resolution))
    cm = _cell_mask_from(cfg, grid)
    b = cfg.boundary
    if "file" in b:
        base = load_field(b["file"])
        if base.grid != grid:
            raise ConfigurationError("boundary file grid does not match the config grid")
        base = MapField(grid, base.values, cm)
    else:
        base = sample_map(get_map(b["map"], **b.get("params", {})), grid, cm)
    for make in (harmonic_extension, affine_fit):
        init = make(base)
        if np.isfinite(energy(init, 2.0)):
            return init
        log.warning("%s initialiser leaves S+; trying the next one", init.provenance)
    raise InitializationError("neither harmonic nor affine initialisation gives an immersion")


# --- optimiser -----------------------------------------------------------------------

def _lbfgs_direction(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / np.sum(y * s)
        a = rho * np.sum(s * q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= np.sum(s * y) / np.sum(y * y)
    for a, rho, s, y in reversed(alphas):
        b = rho * np.sum(y * q)
        q += (a - b) * s
    return -q


def minimize_stage(field: MapField, p, cfg: SolveConfig):
    """Descend on ``E_p`` from ``field``; returns ``(field, StageReport)``."""
    t0 = time.perf_counter()
    h = min(field.grid.spacing)
    vals = np.array(field.values)
    E, g = energy_and_gradient(field, p, vals)
    if g is None:
        raise SolverStall("stage start is outside S+", state={"cell": first_bad_cell(field, vals)})
    start_sup = _sup_k(field, vals)
    S, Y = [], []
    history = [E]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if scaled_residual(field, g, p) <= cfg.tol:
            converged = True
            it -= 1
            break
        d = _lbfgs_direction(g, S, Y) if S else -g
        slope = float(np.sum(g * d))
        if slope >= 0.0:
            S.clear()
            Y.clear()
            d = -g
            slope = float(np.sum(g * d))
        step = 1.0
        dmax = float(np.max(np.abs(d)))
        if dmax > 0.25 * h:
            step = 0.25 * h / dmax
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = vals + step * d
            Et, gt = energy_and_gradient(field, p, trial)
            if gt is not None and Et <= E + cfg.c1 * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            if S:
                S.clear()
                Y.clear()
                continue
            # no decrease along steepest descent at round-off level: treat as converged
            if np.max(np.abs(g)) * h < 1e-14 * max(1.0, E):
                converged = True
                break
            raise SolverStall(f"line search failed at p={p}, iteration {it}",
                              state={"energy": E, "cell": first_bad_cell(field, trial), "values": vals})
        s = trial - vals
        y = gt - g
        if np.sum(s * y) > 1e-12 * np.sqrt(np.sum(s * s) * np.sum(y * y)):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        vals, E, g = trial, Et, gt
        history.append(E)
    else:
        converged = scaled_residual(field, g, p) <= cfg.tol
    out = field.with_values(vals, provenance=f"solve:p={p:g}")
    K = _cell_k(out)
    rep = StageReport(
        p=float(p), energy=float(E), sup_k=float(K.max()), var_k=float(np.var(K)),
        residual=scaled_residual(field, g, p), iterations=it, converged=bool(converged),
        wall_time=time.perf_counter() - t0, start_sup_k=start_sup,
        energy_monotone=bool(np.all(np.diff(history) <= 0.0)),
    )
    return out, rep


def _cell_k(field: MapField, values=None):
    G = cell_gradients(field.values if values is None else values, field.grid.spacing)
    K, _ = dilation_batch(G[field.cell_mask])
    return K


def _sup_k(field, values):
    return float(_cell_k(field, values).max())


def solve(cfg: SolveConfig, init: MapField | None = None) -> SolveResult:
    """Run the p-continuation; every stage warm-starts from the previous one."""
    field0 = initial_field(cfg) if init is None else init
    if not field0.immersion:
        raise InitializationError("initial field is not an immersion")
    rng = np.random.default_rng(cfg.seed)
    runs = []
    for r in range(cfg.restarts + 1):
        start = field0
        if r > 0:
            free = ~start.fixed & start.node_mask()
            v = np.array(start.values)
            v[free] += cfg.jitter * min(start.grid.spacing) * rng.standard_normal((int(free.sum()), start.N))
            start = start.with_values(v, provenance=f"jitter:{r}")
        cur = start
        stages = []
        for p in cfg.p_schedule:
            cur, rep = minimize_stage(cur, p, cfg)
            log.info("p=%g E=%.8g supK=%.6g res=%.2e it=%d", p, rep.energy, rep.sup_k, rep.residual, rep.iterations)
            stages.append(rep)
        runs.append((cur, stages))
    best = min(range(len(runs)), key=lambda i: runs[i][1][-1].energy)
    cur, stages = runs[best]
    check = None
    if cfg.selftest:
        check = selftest(cur, cfg.p_schedule, rng, cfg.selftest)
    extra = [{"restart": i, "final_energy": st[-1].energy, "final_sup_k": st[-1].sup_k}
             for i, (_, st) in enumerate(runs)]
    return SolveResult(cur, stages, check, extra)
