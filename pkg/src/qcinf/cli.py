"""Command-line front end.

Exit codes: 0 success, 1 a check failed, 2 bad configuration, 3 numeric
domain failure (S+ violation, stalled solver, rank drift, ...).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .checks import run_verify
from .errors import (
    ConfigurationError,
    DomainViolation,
    FrameDiscontinuity,
    InitializationError,
    PhaseMixed,
    PreconditionError,
    QCError,
    RankDrift,
    ShapeError,
    SolverStall,
    StencilOutOfDomain,
)
from .grid import Grid, MapField, cell_dilation, jet_from_field, load_field, sample_map, save_field
from .maps import get_map, list_maps, parse_params
from .phase import phase_map
from .residuals import q_infinity_residual, q_p_log_scaled
from .solver import SolveConfig, solve
from .tensor import DEFAULT_TAU
from .variations import (
    battery_csv,
    battery_summary,
    counterexample_report,
    directed_search,
    normal_free_trial,
    rank_one_battery,
    _Source,
    _random_centre,
)

log = logging.getLogger("qcinf")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DOMAIN = 0, 1, 2, 3
DOMAIN_ERRORS = (DomainViolation, StencilOutOfDomain, RankDrift, PhaseMixed, FrameDiscontinuity,
                 InitializationError, SolverStall, OverflowError)
CONFIG_ERRORS = (ConfigurationError, PreconditionError, ShapeError, FileNotFoundError, json.JSONDecodeError)


# --- manifest ------------------------------------------------------------------------

class Run:
    """Collects inputs and outputs of one invocation for the run manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs = {}
        self.outputs = []
        self.t0 = time.perf_counter()

    def read_input(self, path):
        data = Path(path).read_bytes()
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def write_text(self, path, text):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
        self.outputs.append(str(path))

    def write_bytes(self, path, data):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
        self.outputs.append(str(path))

    def manifest(self, status) -> dict:
        flags = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func",)}
        doc = {
            "tool": "qcinf",
            "version": __version__,
            "command": self.args.command,
            "flags": flags,
            "seed": getattr(self.args, "seed", None),
            "threads": self.args.threads,
            "backend": backend_name(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": list(self.outputs),
            "exit_code": status,
            "timing": None,
        }
        if self.args.timing:
            doc["timing"] = {"wall_seconds": time.perf_counter() - self.t0}
        return doc


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _threads(args):
    env = os.environ.get("QCINF_THREADS")
    if env:
        try:
            args.threads = int(env)
        except ValueError:
            raise ConfigurationError(f"QCINF_THREADS must be an integer, got {env!r}") from None
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    if args.threads < 1:
        raise ConfigurationError("--threads must be at least 1")


def _map_from_args(args):
    params = parse_params(getattr(args, "params", None))
    if getattr(args, "gamma", None) is not None:
        params["gamma"] = args.gamma
    return get_map(args.map, **params)


def _grid_for(m, res):
    if not m.box:
        raise ConfigurationError(f"map {m.name} has no default box")
    return Grid(tuple(tuple(b) for b in m.box), (res,) * m.n)


# --- commands ------------------------------------------------------------------------

def cmd_verify(args, run: Run):
    if args.trials < 1:
        raise ConfigurationError("--trials must be at least 1")
    results = run_verify(args.trials, args.seed, args.tau, fault=args.inject_fault)
    report = {"trials": args.trials, "seed": args.seed, "tau": args.tau,
              "checks": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    text = _dump(report)
    if args.out:
        run.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    failed = [r for r in results if not r.passed]
    if failed:
        r = failed[0]
        print(f"check {r.name} failed: max error {r.max_error:.3e} > {r.tol:.1e}; witness {json.dumps(r.witness)}",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _residual_rows(jets, args):
    rows, bad = [], []
    for x, j in jets:
        try:
            b = q_infinity_residual(j, args.tau, args.normalization)
            row = [*x, b.dilation_value, np.linalg.norm(b.tangential), np.linalg.norm(b.normal),
                   np.linalg.norm(b.q_infinity)]
            if args.rescaled:
                r, _ = q_p_log_scaled(j, args.p)
                row.append(float(np.linalg.norm(r)))
            rows.append(row)
        except DomainViolation:
            bad.append([float(v) for v in x])
    return rows, bad


def cmd_residual(args, run: Run):
    if args.field:
        run.read_input(args.field)
        field = load_field(args.field)
        pts = field.grid.points()
        inner = field.interior_mask()
        jets = [(pts[idx], jet_from_field(field, idx)) for idx in zip(*np.nonzero(inner))]
        n, source = field.n, f"file:{args.field}"
    else:
        m = _map_from_args(args)
        grid = _grid_for(m, args.grid)
        pts = grid.points()
        jets, outside = [], []
        for idx in np.ndindex(*grid.shape):
            x = pts[idx]
            if m.contains(x):
                jets.append((x, m.jet(x)))
            else:
                outside.append(x.tolist())
        n, source = m.n, m.name
    rows, bad = _residual_rows(jets, args)
    if not args.field:
        bad = outside + bad
    total = len(rows) + len(bad)
    cols = ["x", "y", "z"][:n] + ["K", "tangential", "normal", "q_infinity"] + (["q_p_rescaled"] if args.rescaled else [])
    csv = ",".join(cols) + "\n" + "".join(",".join(repr(float(v)) for v in r) + "\n" for r in rows)
    arr = np.array([r[n:] for r in rows]) if rows else np.zeros((0, len(cols) - n))
    summary = {
        "source": source, "points": total, "evaluated": len(rows),
        "violations": bad, "violation_fraction": len(bad) / max(total, 1),
        "normalization": args.normalization, "tau": args.tau,
        "sup": {c: float(arr[:, k].max()) if len(arr) else 0.0 for k, c in enumerate(cols[n:])},
    }
    if args.rescaled:
        summary["p"] = args.p
    run.write_text(args.out, csv)
    run.write_text(_sibling(args.out, ".summary.json"), _dump(summary))
    print(f"sup|tangential| = {summary['sup']['tangential']:.3e}  sup|normal| = {summary['sup']['normal']:.3e}  "
          f"sup|q_inf| = {summary['sup']['q_infinity']:.3e}  violations {len(bad)}/{total}")
    return EXIT_DOMAIN if summary["violation_fraction"] > 0.01 else EXIT_OK


def cmd_phase(args, run: Run):
    if args.field:
        run.read_input(args.field)
        pm = phase_map(load_field(args.field), args.tau)
    else:
        m = _map_from_args(args)
        pm = phase_map(m, args.tau, _grid_for(m, args.grid))
    run.write_text(args.out + ".csv", pm.to_csv())
    if pm.grid.n in (2, 3):
        run.write_bytes(args.out + ".pgm", pm.to_pgm(args.slice))
    summary = {"counts": {str(k): v for k, v in pm.counts().items()},
               "interface_nodes": int(pm.interface.sum()),
               "uncertain_nodes": int(pm.uncertain.sum()),
               "provenance": pm.provenance, "tau": args.tau}
    if args.line:
        # nodes on the first coordinate axis through the grid centre
        mid = tuple(s // 2 for s in pm.grid.shape[1:])
        axis = pm.grid.axes()
        others = [float(axis[k + 1][mid[k]]) for k in range(len(mid))]
        lab = pm.labels[(slice(None),) + mid]
        summary["line"] = {"fixed_coordinates": others,
                           "labels": sorted({int(v) for v in lab if v >= 0})}
    run.write_text(args.out + ".json", _dump(summary))
    print("labels " + ", ".join(f"{k}: {v}" for k, v in sorted(pm.counts().items()))
          + f"; interface nodes {summary['interface_nodes']}")
    if args.line:
        print(f"line labels {summary['line']['labels']}")
    return EXIT_OK


def _config_from_args(args, run: Run) -> SolveConfig:
    doc = {}
    if args.config:
        doc = json.loads(run.read_input(args.config))
    over = {"p_schedule": args.p_schedule, "max_iter": args.max_iter, "tol": args.tol,
            "restarts": args.restarts, "seed": args.seed, "selftest": args.selftest,
            "resolution": args.resolution}
    for k, v in over.items():
        if v is not None:
            doc[k] = v
    if "boundary" in doc and "file" in doc["boundary"]:
        run.read_input(doc["boundary"]["file"])
    doc["threads"] = args.threads
    return SolveConfig.from_dict(doc)


def cmd_solve(args, run: Run):
    cfg = _config_from_args(args, run)
    res = solve(cfg)
    f = res.field
    K, _, _ = cell_dilation(f)
    n = f.n
    summary = res.summary()
    if not args.timing:
        for s in summary["stages"]:
            s.pop("wall_time")
    final = {"sup_k": float(K.max()), "min_k": float(K.min()), "sup_abs_k_minus_n": float(np.max(np.abs(K - n)))}
    b = cfg.boundary
    if "map" in b:
        ref = sample_map(get_map(b["map"], **b.get("params", {})), f.grid, f.cell_mask)
        mask = f.node_mask()
        final["sup_distance_to_boundary_map"] = float(np.max(np.abs(f.values[mask] - ref.values[mask])))
    summary["final"] = final
    summary["config"] = cfg.to_dict()
    summary["config"].pop("threads")
    prefix = args.out
    run.write_text(prefix + ".json", _dump(summary))
    save_field(f, prefix + ".field.csv")
    run.outputs.append(prefix + ".field.csv")
    for s in res.stages:
        print(f"p={s.p:g}  E={s.energy:.10g}  supK={s.sup_k:.10g}  varK={s.var_k:.3e}  "
              f"residual={s.residual:.2e}  iters={s.iterations}  converged={s.converged}")
    print(f"final sup|K-{n}| = {final['sup_abs_k_minus_n']:.3e}")
    return EXIT_OK


def cmd_vary(args, run: Run):
    m = _map_from_args(args)
    if args.kind == "rank-one":
        trials = rank_one_battery(m, args.trials, args.seed)
    else:
        src = _Source(m)
        trials = []
        for i in range(args.trials):
            rng = np.random.default_rng([args.seed, i])
            eps = float(rng.uniform(0.02, 0.1))
            x = _random_centre(src, rng, eps)
            h = {"kind": "constant", "c": float(rng.choice([-1.0, 1.0]))}
            try:
                t = normal_free_trial(src, x, eps, h, float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-2)))))
            except (PhaseMixed, FrameDiscontinuity) as exc:
                log.info("trial %d skipped: %s", i, exc)
                continue
            t.seed = i
            trials.append(t)
    summary = battery_summary(trials, args.seed)
    summary["kind"] = args.kind
    summary["map"] = m.name
    summary["params"] = m.params
    if args.search and args.kind == "rank-one":
        w = directed_search(m)
        summary["directed_search"] = asdict(w)
    run.write_text(args.out + ".csv", battery_csv(trials))
    run.write_text(args.out + ".json", _dump(summary))
    print(f"{summary['trials']} trials ({summary['degenerate']} degenerate): "
          f"min dK_inf = {summary['min_delta_k']:.3e}")
    if args.search and args.kind == "rank-one":
        print(f"directed search: dK_inf = {summary['directed_search']['delta_k']:.3e}")
    if args.expect_minimal and summary["min_delta_k"] < -args.slack:
        print("a decreasing variation was found; witness in the JSON summary", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_counterexample(args, run: Run):
    rep = counterexample_report(args.gamma, trials=args.trials, seed=args.seed)
    print(rep.table())
    if args.out:
        run.write_text(args.out, rep.to_json())
    return EXIT_OK if rep.identity_sup < rep.power_sup else EXIT_CHECK


def cmd_maps(args, run: Run):
    for name, text in list_maps():
        print(f"{name:16s} {text}")
    return EXIT_OK


def _sibling(path, suffix):
    p = Path(path)
    return str(p.with_suffix("")) + suffix


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qcinf", description="Dilation calculus, residuals, phases, "
                                 "L^p solver and variation trials for quasiconformal immersions.")
    ap.add_argument("--version", action="version", version=f"qcinf {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker count (default: available CPUs; QCINF_THREADS overrides)")
    common.add_argument("--manifest", default=None,
                        help="run manifest path (default: next to the main output, else stderr)")
    common.add_argument("--timing", action="store_true", help="record wall times (outputs stop being byte-stable)")
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_map_args(p):
        p.add_argument("--map", help="catalog map name (see 'maps list')")
        p.add_argument("--params", default=None, help="map parameters, e.g. gamma=1,n=2")
        p.add_argument("--gamma", type=float, default=None, help="shortcut for the power map exponent")
        p.add_argument("--grid", type=int, default=33, help="points per axis on the map's box (default 33)")
        p.add_argument("--field", default=None, help="sampled field file (CSV or JSON) instead of --map")
        p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="relative eps-rank threshold")

    p = sub.add_parser("verify", parents=[common], help="derivative and identity self-checks")
    p.add_argument("--trials", type=int, default=1000, help="random samples per check (default 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", default=None, help="JSON report path (default stdout)")
    p.add_argument("--inject-fault", choices=["e-sign"], default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("residual", parents=[common], help="pointwise residuals over a grid")
    add_map_args(p)
    p.add_argument("--out", required=True, help="CSV path; a .summary.json is written next to it")
    p.add_argument("--rescaled", action="store_true", help="add the rescaled p-system residual column")
    p.add_argument("--p", type=float, default=100.0, help="exponent for --rescaled (default 100)")
    p.add_argument("--normalization", choices=["K", "unit"], default="K",
                   help="weight of the normal part in q_infinity")
    p.set_defaults(func=cmd_residual)

    p = sub.add_parser("phase", parents=[common], help="phase labels, interfaces, CSV and PGM")
    add_map_args(p)
    p.add_argument("--out", required=True, help="output prefix (.csv, .pgm, .json)")
    p.add_argument("--slice", type=int, default=None, help="z index of the PGM slice for 3-D maps")
    p.add_argument("--line", action="store_true", help="report labels on the x-axis line through the centre")
    p.set_defaults(func=cmd_phase)

    p = sub.add_parser("solve", parents=[common], help="L^p dilation minimisation with p-continuation")
    p.add_argument("--config", default=None, help="SolveConfig JSON (schema 1)")
    p.add_argument("--out", required=True, help="output prefix (.json summary, .field.csv)")
    p.add_argument("--p-schedule", type=lambda s: [float(v) for v in s.split(",")], default=None,
                   help="comma-separated increasing p values")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--selftest", type=int, default=None, help="number of gradient self-test states")
    p.add_argument("--resolution", type=lambda s: [int(v) for v in s.split(",")], default=None,
                   help="grid points per axis, e.g. 33,33")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("vary", parents=[common], help="rank-one or normal variation battery")
    add_map_args(p)
    p.add_argument("--kind", choices=["rank-one", "normal"], default="rank-one")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--search", action="store_true", help="also run the directed rank-one search")
    p.add_argument("--expect-minimal", action="store_true", help="exit 1 if some trial lowers K_inf")
    p.add_argument("--slack", type=float, default=1e-8, help="tolerance for --expect-minimal")
    p.add_argument("--out", required=True, help="output prefix (.csv, .json)")
    p.set_defaults(func=cmd_vary)

    p = sub.add_parser("counterexample", parents=[common], help="identity vs u^gamma on the punctured disc")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=50, help="rank-one trials on u^gamma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("maps", parents=[common], help="map catalog")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=cmd_maps)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args)
    try:
        _threads(args)
        if getattr(args, "map", None) is None and args.command in ("residual", "phase", "vary") \
                and not getattr(args, "field", None):
            raise ConfigurationError("--map or --field is required")
        status = args.func(args, run)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except DOMAIN_ERRORS as exc:
        print(f"numeric domain failure: {exc}", file=sys.stderr)
        state = getattr(exc, "state", None)
        if state:
            print(f"state: {_dump({k: v for k, v in state.items() if k != 'values'}).strip()}", file=sys.stderr)
        status = EXIT_DOMAIN
    except QCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_DOMAIN
    _emit_manifest(args, run, status)
    return status


def _emit_manifest(args, run: Run, status):
    doc = _dump(run.manifest(status))
    path = args.manifest
    if path is None and run.outputs:
        path = _sibling(run.outputs[0], ".manifest.json")
    if path is None:
        sys.stderr.write(doc)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(doc)


if __name__ == "__main__":
    sys.exit(main())
