"""Sup-norm variation trials for dilation minimality.

Two families are supported:

* rank-one: ``u + delta f xi`` with the bump ``f(z) = (eps^2 - |z - x|^2)/2``
  on the ball ``B_eps(x)`` and a unit vector ``xi`` in the target;
* normal-free: ``u + delta h nu`` with ``nu`` a unit section of the
  orthogonal complement of ``range K_P(Du)`` and ``h`` a constant or a ramp.

``K_inf`` over the trial region is estimated on nested sample grids with a
local zoom around the best candidates.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dilation import dilation_gradient, dilation_hessian_reduced
from .errors import ConfigurationError, DomainViolation, FrameDiscontinuity, PhaseMixed
from .grid import MapField, gradient_field
from .kernels import ahlfors_gram_spectrum_batch, dilation_batch, dilation_grad_batch
from .maps import AnalyticMap, power_map, power_map_dilation
from .phase import spectrum_label
from .residuals import hessian_contract
from .tensor import DEFAULT_TAU

log = logging.getLogger(__name__)

VERDICT = "rank-one minimal but not minimal among all competitors"


@dataclass
class VariationTrial:
    x: list
    eps: float
    xi: list
    delta: float
    kind: str                  # "rank-one" | "normal-free"
    delta_k: float             # K_inf(varied) - K_inf(base)
    base_sup: float = float("nan")
    varied_sup: float = float("nan")
    converged: bool = True
    shrinks: int = 0
    degenerate: bool = False
    h_spec: dict | None = None
    seed: int | None = None

    def row(self) -> dict:
        return {"kind": self.kind, "x": " ".join(repr(v) for v in self.x), "eps": repr(self.eps),
                "xi": " ".join(repr(v) for v in self.xi), "delta": repr(self.delta),
                "delta_k": repr(self.delta_k), "base_sup": repr(self.base_sup),
                "varied_sup": repr(self.varied_sup), "converged": int(self.converged),
                "shrinks": self.shrinks, "degenerate": int(self.degenerate),
                "seed": "" if self.seed is None else self.seed}


# --- gradient sources ----------------------------------------------------------------

class _Source:
    """Uniform ``Du`` access for analytic maps and sampled fields."""

    def __init__(self, base):
        self.base = base
        if isinstance(base, AnalyticMap):
            self.n, self.N = base.n, base.N
            self._interp = None
        elif isinstance(base, MapField):
            self.n, self.N = base.n, base.N
            du = gradient_field(base)
            self._interp = RegularGridInterpolator(base.grid.axes(), du, bounds_error=True)
        else:
            raise ConfigurationError(f"unsupported base {type(base).__name__}")

    def gradients(self, pts):
        if self._interp is None:
            return self.base.gradients(pts)
        out = self._interp(pts)
        if not np.all(np.isfinite(out)):
            raise DomainViolation("sample points reach nodes without a gradient", where=None)
        return out

    def check_ball(self, x, eps):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ConfigurationError(f"centre must lie in R^{self.n}")
        if not eps > 0:
            raise ConfigurationError("radius must be positive")
        if self._interp is None:
            d = self.base.dist_to_boundary(x)
            if not eps < d:
                raise ConfigurationError(f"ball B_{eps:g}({x.tolist()}) leaves the domain (distance {d:.3g})")
            if not self.base.contains(x):
                raise ConfigurationError(f"{x.tolist()} is outside the domain of {self.base.name}")
        else:
            g = self.base.grid
            lo = np.array([e[0] for e in g.extents]) + np.array(g.spacing)
            hi = np.array([e[1] for e in g.extents]) - np.array(g.spacing)
            if np.any(x - eps < lo) or np.any(x + eps > hi):
                raise ConfigurationError("ball leaves the interior of the sampled field")


def ball_points(x, eps, res):
    """Tensor-grid points ``res^n`` on the cube around ``x`` that lie in the closed ball."""
    x = np.asarray(x, dtype=float)
    t = np.linspace(-eps, eps, res)
    mesh = np.stack(np.meshgrid(*([t] * x.size), indexing="ij"), -1).reshape(-1, x.size)
    keep = np.einsum("mi,mi->m", mesh, mesh) <= eps * eps * (1.0 + 1e-12)
    return x + mesh[keep]


def _zoom_points(c, x, eps, half, res):
    t = np.linspace(-half, half, res)
    mesh = np.stack(np.meshgrid(*([t] * c.size), indexing="ij"), -1).reshape(-1, c.size) + c
    w = mesh - x
    keep = np.einsum("mi,mi->m", w, w) <= eps * eps * (1.0 + 1e-12)
    return mesh[keep]


def sup_estimate(kfun, x, eps, res=65, zooms=3, top=4):
    """Max of ``kfun(points)`` over ``B_eps(x)``: grid pass plus local zooms."""
    pts = ball_points(x, eps, res)
    vals = kfun(pts)
    best = float(np.max(vals))
    half = 2.0 * eps / (res - 1)
    for _ in range(zooms):
        order = np.argsort(vals)[::-1][:top]
        cand_pts, cand_vals = [pts[order]], [vals[order]]
        for c in pts[order]:
            zp = _zoom_points(c, np.asarray(x, float), eps, half, 17)
            cand_pts.append(zp)
            cand_vals.append(kfun(zp))
        pts = np.concatenate(cand_pts)
        vals = np.concatenate(cand_vals)
        best = max(best, float(np.max(vals)))
        half /= 8.0
    return best


def _k_values(P, tau, full_rank=True):
    """Dilation at a stack of gradients; raises if any leaves S+ (or drops rank)."""
    K, ok = dilation_batch(P)
    if not ok.all():
        raise DomainViolation("varied gradient leaves S+", where=None)
    if full_rank:
        s = np.linalg.svd(P, compute_uv=False)
        if np.any(s[:, -1] <= tau * s[:, 0]):
            raise DomainViolation("varied gradient loses eps-rank", where=None)
        if P.shape[1] == P.shape[2]:
            # a sign change of det Du on a connected ball hides a fold between samples
            sg = np.sign(np.linalg.det(P))
            if np.any(sg != sg[0]):
                raise DomainViolation("varied map folds inside the ball", where=None)
    return K


# --- rank-one ------------------------------------------------------------------------

def _rank_one_sup(src, x, eps, xi, delta, res, tau, base_only=False):
    def kfun(pts):
        P = src.gradients(pts)
        if not base_only:
            df = -(pts - x)
            P = P + delta * np.einsum("a,mi->mai", xi, df)
        return _k_values(P, tau)
    return sup_estimate(kfun, x, eps, res)


def rank_one_trial(base, x, eps, xi, delta, tau=DEFAULT_TAU, res=65, tol=1e-6, max_levels=4,
                   max_shrinks=60, seed=None) -> VariationTrial:
    """Compare ``sup K`` over ``B_eps(x)`` before and after ``u + delta f xi``.

    ``delta`` is halved until the varied map is an immersion on the ball.
    The estimate is repeated on a grid with twice the resolution until two
    levels agree to ``tol``.
    """
    src = base if isinstance(base, _Source) else _Source(base)
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (src.N,) or not np.linalg.norm(xi) > 0:
        raise ConfigurationError(f"xi must be a non-zero vector in R^{src.N}")
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    xi = xi / np.linalg.norm(xi)
    src.check_ball(x, eps)
    shrinks = 0
    while True:
        try:
            prev = None
            converged = False
            r = res
            for _ in range(max_levels):
                b = _rank_one_sup(src, x, eps, xi, delta, r, tau, base_only=True)
                v = _rank_one_sup(src, x, eps, xi, delta, r, tau)
                if prev is not None and abs((v - b) - prev) < tol:
                    converged = True
                    break
                prev = v - b
                r = 2 * r - 1
            break
        except DomainViolation:
            # the base is an immersion, so a small enough delta always works
            shrinks += 1
            if shrinks > max_shrinks:
                raise
            delta *= 0.5
    return VariationTrial(x.tolist(), float(eps), xi.tolist(), float(delta), "rank-one", float(v - b),
                          float(b), float(v), converged, shrinks, seed=seed)


def random_unit(rng, N):
    v = rng.standard_normal(N)
    return v / np.linalg.norm(v)


def _random_centre(src, rng, eps):
    box = np.asarray(src.base.box if isinstance(src.base, AnalyticMap)
                     else src.base.grid.extents, dtype=float)
    for _ in range(10000):
        x = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random(len(box))
        try:
            src.check_ball(x, eps)
            return x
        except ConfigurationError:
            continue
    raise ConfigurationError("could not place a trial ball inside the domain")


def rank_one_battery(base, trials=200, seed=0, eps_range=(0.05, 0.2), delta_range=(1e-3, 1e-1),
                     tau=DEFAULT_TAU, directed_fraction=0.25):
    """Independent random trials, each with its own generator ``(seed, index)``.

    A fraction of trials use ``xi = +-K_P(Du(x)) e / |K_P(Du(x)) e|`` for a
    coordinate direction ``e``; the rest are uniform on the sphere.
    """
    src = _Source(base)
    out = []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        eps = float(np.exp(rng.uniform(*np.log(eps_range))))
        x = _random_centre(src, rng, eps)
        delta = float(np.exp(rng.uniform(*np.log(delta_range))))
        if rng.random() < directed_fraction:
            kp = dilation_gradient(src.gradients(x[None])[0])
            col = kp[:, rng.integers(src.n)]
            xi = col * rng.choice([-1.0, 1.0]) if np.linalg.norm(col) > 0 else random_unit(rng, src.N)
        else:
            xi = random_unit(rng, src.N)
        out.append(rank_one_trial(src, x, eps, xi, delta, tau=tau, seed=i))
    return out


def directed_search(base, eps=0.1, deltas=(1e-2, 1e-1), tau=DEFAULT_TAU, res=65, centres=3):
    """Look for a rank-one variation that lowers ``K_inf``.

    Centres are taken towards the maximiser of ``K`` on a coarse scan of the
    domain; ``xi`` runs through ``K_P(Du(z*)) (z* - x)`` directions, where
    ``z*`` is the maximiser of ``K`` on the ball, and their negatives.
    Returns the trial with the most negative change.
    """
    src = _Source(base)
    box = np.asarray(src.base.box if isinstance(src.base, AnalyticMap) else src.base.grid.extents, float)
    axes = [np.linspace(lo + 1.01 * eps, hi - 1.01 * eps, 9) for lo, hi in box]
    scan = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, src.n)
    scan = np.array([p for p in scan if _ball_ok(src, p, eps)])
    K = _k_values(src.gradients(scan), tau)
    best = None
    for x in scan[np.argsort(K)[::-1][:centres]]:
        pts = ball_points(x, eps, res)
        kb = _k_values(src.gradients(pts), tau)
        zs = pts[np.argmax(kb)]
        kp = dilation_gradient(src.gradients(zs[None])[0])
        dirs = [kp @ (zs - x)] + [kp[:, i] for i in range(src.n)]
        for d in dirs:
            if not np.linalg.norm(d) > 0:
                continue
            for sgn in (1.0, -1.0):
                for delta in deltas:
                    t = rank_one_trial(src, x, eps, sgn * d, delta, tau=tau, res=res)
                    if best is None or t.delta_k < best.delta_k:
                        best = t
    return best


def _ball_ok(src, x, eps):
    try:
        src.check_ball(x, eps)
        return True
    except ConfigurationError:
        return False


# --- normal-free ---------------------------------------------------------------------

def _h_eval(h_spec, pts, x):
    kind = h_spec.get("kind", "constant")
    c = float(h_spec.get("c", 1.0))
    if kind == "constant":
        return np.full(len(pts), c), np.zeros_like(pts)
    if kind == "ramp":
        a = np.asarray(h_spec["a"], dtype=float)
        return c + (pts - x) @ a, np.broadcast_to(a, pts.shape).copy()
    raise ConfigurationError(f"unknown h kind {kind!r}; use constant or ramp")


def _null_projectors(P, tau):
    """Orthogonal projectors onto ``range(K_P)^perp`` and the ranks, for a stack."""
    _, KP, ok = dilation_grad_batch(P)
    if not ok.all():
        raise DomainViolation("gradient leaves S+", where=None)
    U, s, _ = np.linalg.svd(KP)
    K, _ = dilation_batch(P)
    ref = np.maximum(s[:, 0], K / np.linalg.norm(P, axis=(1, 2)))
    rank = np.count_nonzero(s > tau * ref[:, None], axis=1)
    N = P.shape[1]
    proj = np.empty((len(P), N, N))
    for m in range(len(P)):
        Un = U[m][:, rank[m]:]
        proj[m] = Un @ Un.T
    return proj, rank


class NormalFrame:
    """Unit section of ``range(K_P)^perp`` aligned with a reference vector."""

    def __init__(self, src: _Source, x, tau=DEFAULT_TAU, index=0, align=0.5):
        self.src, self.tau, self.align = src, tau, align
        proj, rank = _null_projectors(src.gradients(np.asarray(x, float)[None]), tau)
        self.rank = int(rank[0])
        self.codim = src.N - self.rank
        if self.codim == 0:
            self.ref = None
            return
        # prefer directions also normal to the image tangent space
        du = src.gradients(np.asarray(x, float)[None])[0]
        Q, _ = np.linalg.qr(du)
        geo = proj[0] @ (np.eye(src.N) - Q @ Q.T) @ proj[0]
        w, V = np.linalg.eigh(geo)
        if w[-1 - index] < 0.5:
            w, V = np.linalg.eigh(proj[0])
        self.ref = V[:, -1 - index]

    def __call__(self, pts):
        proj, rank = _null_projectors(self.src.gradients(pts), self.tau)
        if np.any(rank != self.rank):
            raise PhaseMixed("rank of K_P changes inside the patch")
        v = proj @ self.ref
        nrm = np.linalg.norm(v, axis=1)
        if np.any(nrm < self.align):
            raise FrameDiscontinuity("normal frame cannot be aligned across the patch")
        return v / nrm[:, None]

    def with_derivative(self, pts, h=1e-6):
        nu = self(pts)
        dnu = np.empty(nu.shape + (pts.shape[1],))
        for i in range(pts.shape[1]):
            e = np.zeros(pts.shape[1])
            e[i] = h
            dnu[:, :, i] = (self(pts + e) - self(pts - e)) / (2.0 * h)
        return nu, dnu


def check_single_phase(src: _Source, pts, tau=DEFAULT_TAU):
    lam, scale = ahlfors_gram_spectrum_batch(src.gradients(pts))
    labels = {spectrum_label(l, s, tau)[0] for l, s in zip(lam, scale)}
    if len(labels) > 1:
        raise PhaseMixed(f"patch meets phases {sorted(labels)}")
    return labels.pop()


def normal_free_trial(base, x, eps, h_spec=None, delta=1e-3, tau=DEFAULT_TAU, res=33, index=0,
                      max_shrinks=60) -> VariationTrial:
    """``u + delta h nu`` on the ball ``D = B_eps(x)``; reports the change of ``K_inf``.

    When ``range K_P`` fills the target, no normal exists and the trial is
    returned with ``degenerate=True`` and zero change.
    """
    src = base if isinstance(base, _Source) else _Source(base)
    h_spec = {"kind": "constant", "c": 1.0} if h_spec is None else dict(h_spec)
    x = np.asarray(x, dtype=float)
    src.check_ball(x, eps)
    pts = ball_points(x, eps, res)
    check_single_phase(src, pts, tau)
    frame = NormalFrame(src, x, tau, index)
    if frame.codim == 0:
        return VariationTrial(x.tolist(), float(eps), [], float(delta), "normal-free", 0.0,
                              degenerate=True, h_spec=h_spec)

    def kfun_factory(d):
        def kfun(p):
            P = src.gradients(p)
            if d:
                nu, dnu = frame.with_derivative(p)
                hv, dh = _h_eval(h_spec, p, x)
                P = P + d * (np.einsum("ma,mi->mai", nu, dh) + hv[:, None, None] * dnu)
            return _k_values(P, tau)
        return kfun

    shrinks = 0
    while True:
        try:
            kfun_factory(delta)(pts)
            break
        except DomainViolation:
            shrinks += 1
            if shrinks > max_shrinks:
                raise
            delta *= 0.5
    b = sup_estimate(kfun_factory(0.0), x, eps, res)
    v = sup_estimate(kfun_factory(delta), x, eps, res)
    return VariationTrial(x.tolist(), float(eps), frame.ref.tolist(), float(delta), "normal-free",
                          float(v - b), float(b), float(v), True, shrinks, h_spec=h_spec)


def normal_point_change(base: AnalyticMap, x, deltas, h_spec=None, tau=DEFAULT_TAU, eps=1e-2):
    """Change of ``K`` at the single point ``x`` under ``u + delta h nu``.

    Returns ``(deltas, changes, predicted_slope)`` where the first-order
    prediction is ``-h(x) nu^T K_PP(Du) : D2u``.
    """
    src = _Source(base)
    h_spec = {"kind": "constant", "c": 1.0} if h_spec is None else dict(h_spec)
    x = np.asarray(x, dtype=float)
    frame = NormalFrame(src, x, tau)
    if frame.codim == 0:
        raise ConfigurationError("no normal direction at this point")
    nu, dnu = frame.with_derivative(x[None])
    hv, dh = _h_eval(h_spec, x[None], x)
    P0 = src.gradients(x[None])
    K0 = _k_values(P0, tau)[0]
    dP = np.einsum("ma,mi->mai", nu, dh) + hv[:, None, None] * dnu
    changes = np.array([_k_values(P0 + d * dP, tau)[0] - K0 for d in deltas])
    j = base.jet(x)
    pred = -hv[0] * float(nu[0] @ hessian_contract(dilation_hessian_reduced(j.du), j.d2u))
    return np.asarray(deltas, float), changes, pred


def loglog_slope(xs, ys):
    xs, ys = np.asarray(xs, float), np.abs(np.asarray(ys, float))
    keep = ys > 0
    if keep.sum() < 2:
        return float("inf")
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


# --- battery output ------------------------------------------------------------------

def battery_summary(trials, seed=None) -> dict:
    dk = np.array([t.delta_k for t in trials if not t.degenerate])
    worst = None
    if dk.size:
        w = min((t for t in trials if not t.degenerate), key=lambda t: t.delta_k)
        worst = asdict(w)
    return {
        "trials": len(trials),
        "degenerate": sum(t.degenerate for t in trials),
        "min_delta_k": float(dk.min()) if dk.size else 0.0,
        "max_delta_k": float(dk.max()) if dk.size else 0.0,
        "unconverged": sum(not t.converged for t in trials),
        "seed": seed,
        "witness": worst,
    }


def battery_csv(trials) -> str:
    buf = io.StringIO()
    fields = list(VariationTrial([], 0.0, [], 0.0, "", 0.0).row())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for t in trials:
        w.writerow(t.row())
    return buf.getvalue()


# --- counterexample ------------------------------------------------------------------

@dataclass
class CounterexampleReport:
    gamma: float
    identity_sup: float
    power_sup: float
    closed_form: float
    boundary_gap: float
    puncture_gap: float
    rank_one: dict
    verdict: str
    comparison: str = field(default="")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("map", "K_inf on punctured disc"),
            ("identity", f"{self.identity_sup:.12g}"),
            (f"u^gamma (gamma={self.gamma:g})", f"{self.power_sup:.12g}"),
            ("closed form 2 + g^2/(g+1)", f"{self.closed_form:.12g}"),
            ("boundary gap on S^1", f"{self.boundary_gap:.3g}"),
            ("gap at puncture", f"{self.puncture_gap:.3g}"),
            ("rank-one battery min dK", f"{self.rank_one['min_delta_k']:.3g}"),
        ]
        w = max(len(a) for a, _ in rows)
        lines = [f"{a:<{w}}  {b}" for a, b in rows]
        lines += ["", self.comparison, self.verdict]
        return "\n".join(lines)


def counterexample_report(gamma=1.0, samples=1000, trials=50, seed=0) -> CounterexampleReport:
    """Identity vs ``u^gamma`` on the punctured unit disc.

    Both maps agree on the unit circle and at the puncture; the identity has
    the smaller sup dilation although ``u^gamma`` passes every rank-one trial.
    """
    gamma = float(gamma)
    if not gamma > 0:
        raise ConfigurationError("gamma must be positive")
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.random(samples)) * (1.0 - 1e-9) + 1e-9
    th = rng.uniform(0.0, 2.0 * np.pi, samples)
    pts = np.stack([r * np.cos(th), r * np.sin(th)], -1)
    m = power_map(gamma, 2)
    k_pow = float(np.max(dilation_batch(m.gradients(pts))[0]))
    k_id = float(np.max(dilation_batch(np.broadcast_to(np.eye(2), (samples, 2, 2)).copy())[0]))
    circle = np.stack([np.cos(th), np.sin(th)], -1)
    bgap = float(np.max(np.abs(np.array([m.value(p) for p in circle]) - circle)))
    small = 1e-8 * circle[:16]
    pgap = float(np.max(np.linalg.norm(np.array([m.value(p) for p in small]), axis=1)))
    battery = rank_one_battery(m, trials=trials, seed=seed)
    summary = battery_summary(battery, seed)
    cf = power_map_dilation(gamma)
    comp = f"{k_id:.10g} < {k_pow:.10g}" if k_id < k_pow else f"{k_id:.10g} >= {k_pow:.10g}"
    return CounterexampleReport(gamma, k_id, k_pow, cf, bgap, pgap, summary, VERDICT, comp)
