"""Phase decomposition by the rank of ``S(Du^T Du)``, interfaces and related checks."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dilation import dilation, dilation_gradient, dilation_hessian_reduced, kp_projections
from .errors import ConfigurationError, DomainViolation, PreconditionError, RankDrift
from .grid import Grid, MapField, components, gradient_field
from .kernels import ahlfors_gram_spectrum_batch, dilation_batch
from .residuals import Jet2, hessian_contract, normal_residual
from .tensor import DEFAULT_TAU, ahlfors, symmetric_spectrum


def spectrum_label(lam, scale, tau=DEFAULT_TAU):
    """Rank of ``S(g)`` from its eigenvalues, thresholded at ``tau * |g|``.

    Returns ``(label, uncertain)``; ``uncertain`` flags an eigenvalue sitting
    within a decade above the cutoff.
    """
    a = np.abs(np.asarray(lam, dtype=float))
    cut = tau * scale
    label = int(np.count_nonzero(a > cut))
    uncertain = bool(np.any((a > cut) & (a <= 10.0 * cut)))
    return label, uncertain


def classify_point(j: Jet2, tau=DEFAULT_TAU):
    """Phase label ``k`` at a jet and the ascending spectrum of ``S(g)``."""
    dilation(j.du)  # S+ check
    g = j.du.T @ j.du
    lam, _ = symmetric_spectrum(ahlfors(g))
    label, _ = spectrum_label(lam, np.linalg.norm(g), tau)
    return label, lam


@dataclass(frozen=True)
class PhaseMap:
    grid: Grid
    labels: np.ndarray       # -1 where not classified
    augmented: np.ndarray    # raw rank at every classified node
    interior: np.ndarray     # label where the 3^n neighbourhood is single-phase, else -1
    interface: np.ndarray
    uncertain: np.ndarray
    spectrum: np.ndarray     # grid + (n,), NaN where not classified
    dilation: np.ndarray     # K at classified nodes, NaN elsewhere
    provenance: str = ""

    def counts(self):
        vals, cnt = np.unique(self.labels[self.labels >= 0], return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, cnt)}

    def to_csv(self) -> str:
        g = self.grid
        pts = g.points()
        buf = io.StringIO()
        coords = ["x", "y", "z"][: g.n]
        mus = [f"mu{k + 1}" for k in range(g.n)]
        buf.write(",".join(coords + ["label"] + mus + ["interface_flag", "uncertain", "K"]) + "\n")
        for idx in zip(*np.nonzero(self.labels >= 0)):
            row = [repr(float(c)) for c in pts[idx]]
            row.append(str(int(self.labels[idx])))
            row += [repr(float(m)) for m in self.spectrum[idx]]
            row += [str(int(self.interface[idx])), str(int(self.uncertain[idx])), repr(float(self.dilation[idx]))]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_pgm(self, axis_index=None) -> bytes:
        """8-bit binary PGM of the labels; 3-D maps need a slice index along z."""
        lab = self.labels
        if self.grid.n == 3:
            k = self.grid.shape[2] // 2 if axis_index is None else axis_index
            lab = lab[:, :, k]
        elif self.grid.n != 2:
            raise ConfigurationError("PGM export needs a 2-D map or a 3-D slice")
        n = self.grid.n
        img = np.where(lab < 0, 0, 64 + (191 * np.clip(lab, 0, n)) // max(n, 1)).astype(np.uint8)
        img = img.T[::-1]  # rows = y descending, columns = x
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def _gradients(source, grid, tau):
    """Gradient array over the grid and the mask where it is defined."""
    if isinstance(source, MapField):
        du = gradient_field(source)
        return du, source.interior_mask(), f"fd:{source.provenance}"
    if grid is None:
        raise ConfigurationError("an analytic source needs a grid")
    pts = grid.points()
    du = np.full(grid.shape + (source.N, source.n), np.nan)
    mask = np.zeros(grid.shape, dtype=bool)
    for idx in np.ndindex(*grid.shape):
        if source.contains(pts[idx]):
            du[idx] = source.jet(pts[idx]).du
            mask[idx] = True
    return du, mask, f"exact:{source.name}"


def phase_map(source, tau=DEFAULT_TAU, grid=None) -> PhaseMap:
    """Label every node by the rank of ``S(g)``.

    ``source`` is a :class:`MapField` (finite-difference gradients at interior
    nodes) or an analytic map sampled on ``grid`` with exact gradients.
    """
    g = source.grid if isinstance(source, MapField) else grid
    du, mask, prov = _gradients(source, grid, tau)
    n = g.n
    labels = np.full(g.shape, -1, dtype=int)
    uncertain = np.zeros(g.shape, dtype=bool)
    spec = np.full(g.shape + (n,), np.nan)
    kval = np.full(g.shape, np.nan)
    P = du[mask]
    if P.size:
        K, ok = dilation_batch(P)
        if not ok.all():
            bad = tuple(int(i[np.argmin(ok)]) for i in np.nonzero(mask))
            raise DomainViolation(f"gradient outside S+ at node {bad}", where=bad)
        lam, scale = ahlfors_gram_spectrum_batch(P)
        lab = np.empty(len(P), dtype=int)
        unc = np.empty(len(P), dtype=bool)
        for t in range(len(P)):
            lab[t], unc[t] = spectrum_label(lam[t], scale[t], tau)
        labels[mask] = lab
        uncertain[mask] = unc
        spec[mask] = lam
        kval[mask] = K
    interface = _interface_mask(labels)
    interior = _interior_labels(labels, n)
    return PhaseMap(g, labels, labels.copy(), interior, interface, uncertain, spec, kval, prov)


def _interface_mask(labels):
    """Classified nodes with a face neighbour carrying a different label."""
    out = np.zeros(labels.shape, dtype=bool)
    valid = labels >= 0
    for ax in range(labels.ndim):
        a = np.take(labels, range(labels.shape[ax] - 1), axis=ax)
        b = np.take(labels, range(1, labels.shape[ax]), axis=ax)
        diff = (a != b) & (a >= 0) & (b >= 0)
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        out[tuple(lo)] |= diff
        out[tuple(hi)] |= diff
    return out & valid


def _interior_labels(labels, n):
    out = np.full(labels.shape, -1, dtype=int)
    st = np.ones((3,) * labels.ndim, dtype=bool)
    for k in range(n + 1):
        core = ndimage.binary_erosion(labels == k, structure=st, border_value=0)
        out[core] = k
    return out


def constant_dilation_check(source, tau=DEFAULT_TAU, grid=None):
    """Per connected single-phase component: mean ``K`` and ``max |K - mean|``.

    Components of the full-rank phase and of the conformal phase are
    reported; each entry is ``{"label", "size", "mean_k", "max_dev"}``.
    """
    pm = phase_map(source, tau, grid)
    n = pm.grid.n
    out = []
    for k in (n, 0):
        lab, count = components(pm.labels == k)
        for c in range(1, count + 1):
            vals = pm.dilation[lab == c]
            mean = float(np.mean(vals))
            out.append({"label": k, "size": int(vals.size), "mean_k": mean,
                        "max_dev": float(np.max(np.abs(vals - mean)))})
    return out


def line_patch(p0, direction, ts):
    """Points ``p0 + t d`` with unit tangent ``d`` (shape ``(m, 1, n)``)."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    pts = np.asarray(p0, dtype=float)[None, :] + np.asarray(ts, dtype=float)[:, None] * d[None, :]
    return pts, np.broadcast_to(d, (len(pts), 1, d.size)).copy()


def interface_identity_check(amap, points, tangents, tau=DEFAULT_TAU, h=1e-5):
    """Covariant-derivative identity for ``[K_P]^perp`` along a submanifold.

    ``points`` is ``(m, n)``; ``tangents`` is ``(m, t, n)`` (orthonormalised
    here). The left side differentiates ``[K_P(Du)]^perp`` by central
    differences along the tangents and contracts with ``K_P``; the right side
    is ``-[K_P]^perp K_PP : (Pi_M D2u)`` from the exact jet. Also returns
    the range component ``[K_P]^T`` of the left side, which vanishes where
    the normal residual does.
    """
    points = np.asarray(points, dtype=float)
    tangents = np.asarray(tangents, dtype=float)
    if tangents.ndim != 3 or tangents.shape[0] != len(points):
        raise PreconditionError("tangents must be (m, t, n)")
    rows = []
    for p, T in zip(points, tangents):
        Q, _ = np.linalg.qr(T.T)
        Pi = Q @ Q.T
        j = amap.jet(p)
        kp = dilation_gradient(j.du)
        pair = kp_projections(j.du, tau)
        # d/ds [K_P]^perp along each tangent, assembled into the tangential gradient
        grad = np.zeros((kp.shape[0], kp.shape[0], p.size))
        for t in Q.T:
            plus = kp_projections(amap.jet(p + h * t).du, tau)
            minus = kp_projections(amap.jet(p - h * t).du, tau)
            if plus.eps_rank != pair.eps_rank or minus.eps_rank != pair.eps_rank:
                raise RankDrift(f"rank of K_P changes along the patch at {p}")
            dproj = (plus.proj_null - minus.proj_null) / (2.0 * h)
            grad += dproj[:, :, None] * t[None, None, :]
        lhs = np.einsum("abi,bi->a", grad, kp)
        d2_tan = np.einsum("il,glk->gik", Pi, j.d2u)
        rhs = -pair.proj_null @ hessian_contract(dilation_hessian_reduced(j.du), d2_tan)
        nres = normal_residual(j, tau)
        rows.append({
            "point": p.tolist(),
            "lhs_norm": float(np.linalg.norm(lhs)),
            "identity_residual": float(np.linalg.norm(lhs - rhs)),
            "normal_residual": float(np.linalg.norm(nres)),
            "range_component": float(np.linalg.norm(pair.proj_range @ lhs)),
            "kp_rank": pair.eps_rank,
        })
    res = np.array([r["identity_residual"] for r in rows])
    return {"max_identity_residual": float(res.max()), "points": rows}
