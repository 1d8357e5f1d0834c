"""Uniform rectangular grids, sampled map fields and their finite differences.

Two discrete gradients live here:

* nodal central differences (``gradient_field`` / ``hessian_field`` /
  ``jet_from_field``), used for residual and phase analysis;
* the cell-centre (multilinear element) gradient ``cell_gradients`` and its
  exact adjoint, used by quadrature and by the solver energy.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DomainViolation, StencilOutOfDomain
from .kernels import dilation_batch
from .residuals import Jet2
from .tensor import DEFAULT_TAU, eps_rank, singular_values

FIELD_SCHEMA = 1
MIN_POINTS = 5


@dataclass(frozen=True)
class Grid:
    extents: tuple
    shape: tuple

    def __post_init__(self):
        ext = tuple((float(lo), float(hi)) for lo, hi in self.extents)
        shp = tuple(int(s) for s in self.shape)
        if len(ext) != len(shp) or len(shp) not in (1, 2, 3):
            raise ConfigurationError("grid needs matching extents and shape in 1-3 dimensions")
        if any(s < MIN_POINTS for s in shp):
            raise ConfigurationError(f"need at least {MIN_POINTS} points per axis, got {shp}")
        if any(not hi > lo for lo, hi in ext):
            raise ConfigurationError("every extent must satisfy hi > lo")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "shape", shp)

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def spacing(self):
        return tuple((hi - lo) / (s - 1) for (lo, hi), s in zip(self.extents, self.shape))

    def axes(self):
        return [np.linspace(lo, hi, s) for (lo, hi), s in zip(self.extents, self.shape)]

    def points(self):
        """Node coordinates, shape ``shape + (n,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def cell_centres(self):
        ax = [0.5 * (a[1:] + a[:-1]) for a in self.axes()]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def boundary_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        for k in range(self.n):
            sl = [slice(None)] * self.n
            sl[k] = 0
            m[tuple(sl)] = True
            sl[k] = -1
            m[tuple(sl)] = True
        return m

    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @classmethod
    def square(cls, lo, hi, points, n=2):
        return cls(((lo, hi),) * n, (points,) * n)


@dataclass(frozen=True)
class MapField:
    """Nodal values ``values[idx] in R^N`` on a grid.

    ``cell_mask`` marks the active cells (default: all); ``fixed`` marks
    nodes carrying Dirichlet data (default: the outer boundary plus every
    node touching an inactive cell).
    """

    grid: Grid
    values: np.ndarray
    cell_mask: np.ndarray | None = None
    fixed: np.ndarray | None = None
    provenance: str = ""
    immersion: bool = field(init=False, default=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == self.grid.n:
            v = v[..., None]
        if v.shape[:-1] != self.grid.shape:
            raise ConfigurationError(f"values of shape {v.shape} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        cshape = tuple(s - 1 for s in self.grid.shape)
        cm = np.ones(cshape, dtype=bool) if self.cell_mask is None else np.asarray(self.cell_mask, dtype=bool)
        if cm.shape != cshape:
            raise ConfigurationError("cell mask has the wrong shape")
        object.__setattr__(self, "cell_mask", cm)
        if self.fixed is None:
            fx = self.grid.boundary_mask() | ~_nodes_all_active(cm)
        else:
            fx = np.asarray(self.fixed, dtype=bool)
        object.__setattr__(self, "fixed", fx)
        object.__setattr__(self, "immersion", _immersion_flag(self))

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values, provenance=None) -> "MapField":
        return MapField(self.grid, values, self.cell_mask, self.fixed,
                        self.provenance if provenance is None else provenance)

    def node_mask(self):
        """Nodes touching at least one active cell."""
        return _nodes_any_active(self.cell_mask)

    def interior_mask(self, layers=1):
        """Nodes whose ``layers``-neighbourhood lies in active cells."""
        m = _nodes_all_active(self.cell_mask) & ~self.grid.boundary_mask()
        for _ in range(layers - 1):
            m = ndimage.binary_erosion(m, structure=np.ones((3,) * self.grid.n), border_value=0)
        return m


def _nodes_any_active(cm):
    n = cm.ndim
    out = np.zeros(tuple(s + 1 for s in cm.shape), dtype=bool)
    for off in np.ndindex(*(2,) * n):
        sl = tuple(slice(o, o + s) for o, s in zip(off, cm.shape))
        out[sl] |= cm
    return out


def _nodes_all_active(cm):
    n = cm.ndim
    shape = tuple(s + 1 for s in cm.shape)
    out = np.ones(shape, dtype=bool)
    pad = np.pad(cm, 1, constant_values=False)
    for off in np.ndindex(*(2,) * n):
        sl = tuple(slice(1 - o, 1 - o + s) for o, s in zip(off, shape))
        out &= pad[sl]
    return out


def sample_map(m, grid: Grid, cell_mask=None) -> MapField:
    """Sample an analytic map at every node that touches an active cell."""
    if m.n != grid.n:
        raise ConfigurationError(f"map {m.name} has n={m.n}, grid has n={grid.n}")
    pts = grid.points()
    vals = np.zeros(grid.shape + (m.N,))
    cm = np.ones(tuple(s - 1 for s in grid.shape), dtype=bool) if cell_mask is None else cell_mask
    need = _nodes_any_active(cm)
    for idx in zip(*np.nonzero(need)):
        vals[idx] = m.value(pts[idx])
    return MapField(grid, vals, cell_mask, provenance=f"sampled:{m.name}")


# --- nodal finite differences -----------------------------------------------------

def gradient_field(field: MapField):
    """Central-difference gradient, shape ``grid + (N, n)``; NaN on the boundary."""
    v = field.values
    g = field.grid
    out = np.full(g.shape + (field.N, g.n), np.nan)
    inner = tuple(slice(1, -1) for _ in range(g.n))
    for k, h in enumerate(g.spacing):
        fwd = [slice(1, -1)] * g.n
        bwd = [slice(1, -1)] * g.n
        fwd[k] = slice(2, None)
        bwd[k] = slice(None, -2)
        out[inner + (slice(None), k)] = (v[tuple(fwd)] - v[tuple(bwd)]) / (2.0 * h)
    return out


def hessian_field(field: MapField):
    """Central-difference Hessian ``grid + (N, n, n)``, symmetrised; NaN on the boundary."""
    v = field.values
    g = field.grid
    n = g.n
    out = np.full(g.shape + (field.N, n, n), np.nan)
    inner = tuple(slice(1, -1) for _ in range(n))

    def shifted(offsets):
        return v[tuple(slice(1 + o, v.shape[d] - 1 + o) for d, o in enumerate(offsets))]

    hs = g.spacing
    centre = v[inner]
    for i in range(n):
        e = [0] * n
        e[i] = 1
        ep = shifted(e)
        e[i] = -1
        em = shifted(e)
        out[inner + (slice(None), i, i)] = (ep - 2.0 * centre + em) / hs[i] ** 2
        for j in range(i + 1, n):
            def s(a, b):
                o = [0] * n
                o[i], o[j] = a, b
                return shifted(o)
            val = (s(1, 1) - s(1, -1) - s(-1, 1) + s(-1, -1)) / (4.0 * hs[i] * hs[j])
            out[inner + (slice(None), i, j)] = val
            out[inner + (slice(None), j, i)] = val
    return out


def jet_from_field(field: MapField, index) -> Jet2:
    """Finite-difference jet at a node one or more cells away from the boundary."""
    index = tuple(int(i) for i in index)
    g = field.grid
    if len(index) != g.n or any(i < 1 or i > s - 2 for i, s in zip(index, g.shape)):
        raise StencilOutOfDomain(f"node {index} has no full stencil on grid {g.shape}")
    if not field.interior_mask()[index]:
        raise StencilOutOfDomain(f"node {index} touches an inactive cell")
    block = field.values[tuple(slice(i - 1, i + 2) for i in index)]
    du, d2u = _block_jet(block, g.spacing)
    return Jet2(g.points()[index], field.values[index], du, d2u, provenance="fd-grid")


def _block_jet(block, spacing):
    # central stencils at the centre of a 3^n block of shape (3,)*n + (N,)
    n = len(spacing)
    c = (1,) * n
    N = block.shape[-1]
    du = np.empty((N, n))
    d2u = np.empty((N, n, n))

    def at(offsets):
        return block[tuple(1 + o for o in offsets)]

    for i in range(n):
        e = [0] * n
        e[i] = 1
        up = at(e)
        e[i] = -1
        um = at(e)
        du[:, i] = (up - um) / (2.0 * spacing[i])
        d2u[:, i, i] = (up - 2.0 * block[c] + um) / spacing[i] ** 2
        for j in range(i + 1, n):
            def s(a, b):
                o = [0] * n
                o[i], o[j] = a, b
                return at(o)
            d2u[:, i, j] = d2u[:, j, i] = (s(1, 1) - s(1, -1) - s(-1, 1) + s(-1, -1)) / (4.0 * spacing[i] * spacing[j])
    return du, d2u


def jets_from_field(field: MapField):
    """All interior finite-difference jets as ``(index, Jet2)`` pairs."""
    du = gradient_field(field)
    d2u = hessian_field(field)
    pts = field.grid.points()
    mask = field.interior_mask()
    for idx in zip(*np.nonzero(mask)):
        yield idx, Jet2(pts[idx], field.values[idx], du[idx], d2u[idx], provenance="fd-grid")


def _immersion_flag(field: MapField, tau=DEFAULT_TAU) -> bool:
    g = field.grid
    if field.N < g.n:
        return False
    du = gradient_field(field)
    mask = field.interior_mask()
    if not mask.any():
        return False
    for P in du[mask]:
        if eps_rank(singular_values(P), tau) < g.n:
            return False
    return True


# --- element gradients and quadrature ---------------------------------------------

def cell_gradients(values, spacing):
    """Gradient of the multilinear interpolant at every cell centre.

    ``values`` has shape ``nodes + (N,)``; the result ``cells + (N, n)``.
    """
    n = len(spacing)
    comps = []
    for k in range(n):
        d = np.diff(values, axis=k) / spacing[k]
        for m in range(n):
            if m != k:
                d = 0.5 * (np.take(d, range(0, d.shape[m] - 1), axis=m) + np.take(d, range(1, d.shape[m]), axis=m))
        comps.append(d)
    return np.stack(comps, axis=-1)


def cell_gradients_adjoint(cotangent, spacing, node_shape):
    """Transpose of :func:`cell_gradients`: cell cotangents to nodal ones."""
    n = len(spacing)
    out = np.zeros(tuple(node_shape) + (cotangent.shape[-2],))
    for k in range(n):
        d = cotangent[..., k]
        for m in reversed([m for m in range(n) if m != k]):
            pad_hi = [(0, 0)] * d.ndim
            pad_lo = [(0, 0)] * d.ndim
            pad_hi[m] = (0, 1)
            pad_lo[m] = (1, 0)
            d = 0.5 * (np.pad(d, pad_hi) + np.pad(d, pad_lo))
        pad_hi = [(0, 0)] * d.ndim
        pad_lo = [(0, 0)] * d.ndim
        pad_hi[k] = (0, 1)
        pad_lo[k] = (1, 0)
        out += (np.pad(d, pad_lo) - np.pad(d, pad_hi)) / spacing[k]
    return out


def cell_dilation(field: MapField):
    """``K`` at active cell centres (flattened) and the cell indices."""
    G = cell_gradients(field.values, field.grid.spacing)
    idx = np.nonzero(field.cell_mask)
    K, ok = dilation_batch(G[idx])
    return K, ok, idx


def lp_norm_of_dilation(field: MapField, p):
    """Midpoint-rule ``L^p`` norms of ``K(Du)`` over the active cells.

    Returns ``{"raw": (int K^p)^(1/p) or None, "integral": int K^p,
    "normalized": (mean K^p)^(1/p), "sup": max K}``; ``p = inf`` gives the
    maximum in every slot. Large ``p`` is evaluated relative to the maximum.
    """
    K, ok, idx = cell_dilation(field)
    if not ok.all():
        bad = tuple(int(i[np.argmin(ok)]) for i in idx)
        raise DomainViolation(f"gradient outside S+ in cell {bad}", where=bad)
    kmax = float(K.max())
    vol = field.grid.cell_volume() * K.size
    if np.isinf(p):
        return {"p": "inf", "integral": float("inf"), "raw": kmax, "normalized": kmax, "sup": kmax}
    p = float(p)
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    mean_rel = float(np.mean((K / kmax) ** p))
    normalized = kmax * mean_rel ** (1.0 / p)
    log_int = p * np.log(kmax) + np.log(mean_rel * vol)
    integral = float(np.exp(log_int)) if log_int < 700 else float("inf")
    raw = float(np.exp(log_int / p))
    return {"p": p, "integral": integral, "raw": raw, "normalized": normalized, "sup": kmax}


def components(mask, connectivity=1):
    """Connected components of a boolean node mask (face connectivity by default)."""
    structure = ndimage.generate_binary_structure(mask.ndim, connectivity)
    labels, count = ndimage.label(mask, structure=structure)
    return labels, count


# --- I/O -------------------------------------------------------------------------

def field_header(field: MapField) -> dict:
    g = field.grid
    return {"schema": FIELD_SCHEMA, "n": g.n, "N": field.N,
            "extents": [list(e) for e in g.extents], "resolution": list(g.shape)}


def field_to_json(field: MapField) -> str:
    doc = field_header(field)
    doc["values"] = field.values.reshape(-1, field.N).tolist()
    if not field.cell_mask.all():
        doc["cell_mask"] = field.cell_mask.astype(int).ravel().tolist()
    return json.dumps(doc)


def field_from_json(text: str) -> MapField:
    doc = json.loads(text)
    if doc.get("schema") != FIELD_SCHEMA:
        raise ConfigurationError(f"unsupported field schema {doc.get('schema')!r}")
    grid = Grid(tuple(tuple(e) for e in doc["extents"]), tuple(doc["resolution"]))
    vals = np.asarray(doc["values"], dtype=float).reshape(grid.shape + (int(doc["N"]),))
    cm = doc.get("cell_mask")
    if cm is not None:
        cm = np.asarray(cm, dtype=bool).reshape(tuple(s - 1 for s in grid.shape))
    return MapField(grid, vals, cm, provenance="json")


def field_to_csv(field: MapField) -> str:
    buf = io.StringIO()
    head = field_header(field)
    if not field.cell_mask.all():
        head["inactive_cells"] = np.argwhere(~field.cell_mask).tolist()
    buf.write("# qcinf-field " + json.dumps(head) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    n, N = field.grid.n, field.N
    w.writerow([f"i{k}" for k in range(n)] + [f"u{a}" for a in range(N)])
    for idx in np.ndindex(*field.grid.shape):
        w.writerow(list(idx) + [repr(float(x)) for x in field.values[idx]])
    return buf.getvalue()


def field_from_csv(text: str) -> MapField:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# qcinf-field "):
        raise ConfigurationError("missing qcinf-field header line")
    head = json.loads(lines[0][len("# qcinf-field "):])
    grid = Grid(tuple(tuple(e) for e in head["extents"]), tuple(head["resolution"]))
    N = int(head["N"])
    vals = np.zeros(grid.shape + (N,))
    seen = 0
    for row in csv.reader(lines[2:]):
        if not row:
            continue
        idx = tuple(int(t) for t in row[:grid.n])
        vals[idx] = [float(t) for t in row[grid.n:]]
        seen += 1
    if seen != int(np.prod(grid.shape)):
        raise ConfigurationError(f"expected {np.prod(grid.shape)} rows, read {seen}")
    cm = None
    if "inactive_cells" in head:
        cm = np.ones(tuple(s - 1 for s in grid.shape), dtype=bool)
        for c in head["inactive_cells"]:
            cm[tuple(c)] = False
    return MapField(grid, vals, cm, provenance="csv")


def load_field(path) -> MapField:
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        return field_from_json(text)
    return field_from_csv(text)


def save_field(field: MapField, path):
    text = field_to_json(field) if str(path).endswith(".json") else field_to_csv(field)
    with open(path, "w") as fh:
        fh.write(text)
