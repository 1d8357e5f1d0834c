"""Self-verification suite for the dilation derivatives and tensor helpers.

Each check samples random gradients, compares a closed form with an
independent evaluation and records the worst error and its witness.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dilation import (
    dilation,
    dilation_gradient,
    dilation_gradient_fd,
    dilation_hessian_fd,
    dilation_hessian_reduced,
    e_tensor,
    identity_n_equals_N,
    kp_projections,
)
from .tensor import DEFAULT_TAU, ahlfors, contract, projections


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    samples: int
    witness: dict | None = None

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tol)

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def random_gradient(rng, n=None, N=None, max_cond=1e4):
    """Random ``P`` in S+ with ``cond(P^T P) < max_cond``."""
    n = int(rng.integers(2, 4)) if n is None else n
    N = int(rng.integers(max(n, 2), 5)) if N is None else N
    while True:
        P = rng.standard_normal((N, n))
        s = np.linalg.svd(P, compute_uv=False)
        if (s[0] / s[-1]) ** 2 < max_cond:
            return P


def conformal_gradient(rng, n=None, N=None):
    """``c Q`` with orthonormal columns ``Q``; ``K_P`` vanishes there."""
    n = int(rng.integers(2, 4)) if n is None else n
    N = int(rng.integers(max(n, 2), 5)) if N is None else N
    Q, _ = np.linalg.qr(rng.standard_normal((N, n)))
    return float(np.exp(rng.uniform(-1, 1))) * Q


def _hessian_samples(rng, trials, n=None):
    """Random gradients, every fourth one conformal (where nothing is projected away)."""
    for t in range(trials):
        yield conformal_gradient(rng, n) if t % 4 == 3 else random_gradient(rng, n)


def _record(name, errs, tol, witnesses):
    errs = np.asarray(errs)
    k = int(np.argmax(errs))
    return CheckResult(name, float(errs[k]), tol, len(errs), witnesses[k])


def check_gradient(rng, trials, tol=1e-6):
    errs, wit = [], []
    for _ in range(trials):
        P = random_gradient(rng)
        a, f = dilation_gradient(P), dilation_gradient_fd(P)
        errs.append(np.linalg.norm(a - f) / np.linalg.norm(f))
        wit.append({"P": P.tolist()})
    return _record("k_p", errs, tol, wit)


def check_reduced_hessian(rng, trials, tol=1e-5, tau=DEFAULT_TAU, E=None, n=None):
    errs, wit = [], []
    for P in _hessian_samples(rng, trials, n):
        proj = kp_projections(P, tau).proj_null
        full = dilation_hessian_fd(P)
        red = dilation_hessian_reduced(P, E)
        a = np.einsum("ac,cibj->aibj", proj, red)
        f = np.einsum("ac,cibj->aibj", proj, full)
        # scale by the unprojected Hessian so a vanishing projection is not 0/0
        errs.append(np.linalg.norm(a - f) / np.linalg.norm(full))
        wit.append({"P": P.tolist()})
    return _record("k_pp_reduced", errs, tol, wit)


def check_square_identity(rng, trials, tol=1e-9):
    errs, wit = [], []
    for _ in range(trials):
        n = int(rng.integers(2, 4))
        P = random_gradient(rng, n, n, max_cond=1e2)
        errs.append(identity_n_equals_N(P))
        wit.append({"P": P.tolist()})
    return _record("n_equals_N_identity", errs, tol, wit)


def check_dilation_bounds(rng, trials, tol=1e-12):
    """``K >= n``, scale and rotation invariance."""
    errs, wit = [], []
    for _ in range(trials):
        P = random_gradient(rng)
        N, n = P.shape
        k = dilation(P)
        Q, _ = np.linalg.qr(rng.standard_normal((N, N)))
        c = float(np.exp(rng.uniform(-3, 3)))
        e = max(n - k, abs(dilation(c * P) - k), abs(dilation(Q @ P) - k)) / k
        errs.append(max(e, 0.0))
        wit.append({"P": P.tolist(), "scale": c})
    return _record("dilation_invariants", errs, tol, wit)


def check_contract(rng, trials, tol=1e-12):
    """Double contraction against explicit loops."""
    errs, wit = [], []
    for _ in range(trials):
        N, n = rng.integers(1, 4, size=2)
        H = rng.standard_normal((N, n, N, n))
        D = rng.standard_normal((N, n))
        ref = np.zeros((N, n))
        for a in range(N):
            for i in range(n):
                for b in range(N):
                    for j in range(n):
                        ref[a, i] += H[a, i, b, j] * D[b, j]
        errs.append(np.max(np.abs(contract(H, D) - ref)) / max(1.0, np.max(np.abs(ref))))
        wit.append({"shape": [int(N), int(n)]})
    return _record("contract", errs, tol, wit)


def check_projections(rng, trials, tol=1e-10, tau=DEFAULT_TAU):
    """Idempotent, symmetric, complementary, and the null part kills the range."""
    errs, wit = [], []
    for _ in range(trials):
        P = random_gradient(rng)
        M = dilation_gradient(P)
        pr = projections(M, tau)
        A, B = pr.proj_range, pr.proj_null
        I = np.eye(len(A))
        e = max(np.max(np.abs(A @ A - A)), np.max(np.abs(A - A.T)), np.max(np.abs(A + B - I)),
                np.max(np.abs(B @ M)) / max(1.0, np.max(np.abs(M))))
        errs.append(e)
        wit.append({"P": P.tolist()})
    return _record("projections", errs, tol, wit)


def check_ahlfors(rng, trials, tol=1e-12):
    errs, wit = [], []
    for _ in range(trials):
        n = int(rng.integers(1, 5))
        A = rng.standard_normal((n, n))
        S = ahlfors(A)
        errs.append(max(abs(np.trace(S)), np.max(np.abs(S - S.T))) / max(1.0, np.max(np.abs(A))))
        wit.append({"A": A.tolist()})
    return _record("ahlfors", errs, tol, wit)


def faulty_e_tensor(n):
    """``E`` with the sign of its trace term flipped (mutation smoke test)."""
    d = np.eye(n)
    return e_tensor(n) + (4.0 / n) * np.einsum("mk,jl->kjlm", d, d)


def run_verify(trials=1000, seed=0, tau=DEFAULT_TAU, fault=None):
    """All checks with one generator; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    small = max(1, min(trials, 100))
    E = None
    if fault == "e-sign":
        # only makes sense for a fixed n; pin the Hessian check to n = 2
        E = faulty_e_tensor(2)
    out = [
        check_contract(rng, small),
        check_ahlfors(rng, small),
        check_projections(rng, small, tau=tau),
        check_dilation_bounds(rng, trials),
        check_gradient(rng, trials),
    ]
    out.append(check_reduced_hessian(rng, small, tau=tau, E=E, n=None if E is None else 2))
    out.append(check_square_identity(rng, small))
    return out
