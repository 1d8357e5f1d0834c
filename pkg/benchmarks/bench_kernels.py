"""Compare the numba and numpy paths of the batched kernels.

    python benchmarks/bench_kernels.py [--size 200000] [--repeat 5]

Both paths are run on the same random gradients; results are checked for
agreement before timings are printed.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from qcinf import _accel
from qcinf.kernels import ahlfors_gram_spectrum_batch, dilation_batch, dilation_grad_batch


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def _rel_diff(a, b):
    # samples outside S+ are inf on both paths; they must agree on which ones
    fa, fb = np.isfinite(a), np.isfinite(b)
    if not np.array_equal(fa, fb):
        return float("inf")
    both = fa & fb
    return float(np.max(np.abs(a[both] - b[both]) / np.maximum(1.0, np.abs(b[both])), initial=0.0))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(args.seed)
    kernels = [("dilation", dilation_batch), ("dilation+grad", dilation_grad_batch),
               ("S(g) spectrum", ahlfors_gram_spectrum_batch)]
    print(f"{'kernel':16s} {'shape':8s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speed-up':>9s} {'max diff':>9s}")
    for N, n in [(2, 2), (3, 3), (4, 2)]:
        P = rng.standard_normal((args.size, N, n))
        for name, fn in kernels:
            prev = _accel.set_numba(False)
            t_np = timeit(fn, P, repeat=args.repeat)
            ref = fn(P)
            _accel.set_numba(True)
            t_nb = timeit(fn, P, repeat=args.repeat) if _accel.use_numba() else float("nan")
            out = fn(P)
            _accel.set_numba(prev)
            diff = max(_rel_diff(a, b) for a, b in zip(out, ref) if np.asarray(a).dtype.kind == "f")
            print(f"{name:16s} {f'{N}x{n}':8s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:9.2f} {diff:9.1e}")


if __name__ == "__main__":
    main()
