from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcinf.dilation import (
    DET_FLOOR,
    dilation,
    dilation_gradient,
    dilation_gradient_fd,
    dilation_hessian_fd,
    dilation_hessian_reduced,
    dilation_jet,
    identity_n_equals_N,
    in_s_plus,
    kp_projections,
)
from qcinf.errors import DomainViolation, ShapeError
from qcinf.tensor import projections

from conftest import random_immersion


def k_complex(P):
    """K with complex arithmetic; analytic in the entries of P."""
    n = P.shape[1]
    g = P.T @ P
    return np.sum(P * P) / np.linalg.det(g) ** (1.0 / n)


def complex_step_gradient(P, h=1e-30):
    G = np.empty(P.shape)
    for idx in np.ndindex(*P.shape):
        Z = P.astype(complex)
        Z[idx] += 1j * h
        G[idx] = k_complex(Z).imag / h
    return G


shapes = st.sampled_from([(2, 2), (3, 2), (4, 2), (3, 3), (4, 3)])


@settings(max_examples=80, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_dilation_lower_bound_and_invariance(shape, seed):
    rng = np.random.default_rng(seed)
    P = random_immersion(rng, *shape)
    N, n = shape
    k = dilation(P)
    assert k >= n * (1 - 1e-12)
    Q, _ = np.linalg.qr(rng.standard_normal((N, N)))
    R, _ = np.linalg.qr(rng.standard_normal((n, n)))
    assert dilation(3.7 * P) == pytest.approx(k, rel=1e-12)
    assert dilation(Q @ P @ R) == pytest.approx(k, rel=1e-10)


def test_conformal_has_dilation_n(rng):
    for N, n in [(2, 2), (3, 2), (3, 3), (4, 3)]:
        Q, _ = np.linalg.qr(rng.standard_normal((N, n)))
        assert dilation(2.5 * Q) == pytest.approx(n, rel=1e-13)
        assert np.abs(dilation_gradient(2.5 * Q)).max() < 1e-13


def test_s_plus_floor():
    P = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert not in_s_plus(P)
    with pytest.raises(DomainViolation):
        dilation(P)
    tiny = np.array([[1.0, 0.0], [0.0, 1e-8]])
    assert in_s_plus(tiny) == (1e-16 > DET_FLOOR * np.sum(tiny**2) ** 2)
    with pytest.raises(ShapeError):
        dilation(np.ones(3))
    with pytest.raises(DomainViolation):
        dilation(np.ones((2, 3)))  # N < n is never an immersion


def test_gradient_against_complex_step(rng):
    for shape in [(2, 2), (3, 2), (4, 2), (3, 3), (4, 3)]:
        for _ in range(10):
            P = random_immersion(rng, *shape)
            assert np.allclose(dilation_gradient(P), complex_step_gradient(P), rtol=1e-11, atol=1e-12)


def test_gradient_against_central_differences(rng):
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 4))
        P = random_immersion(rng, int(rng.integers(n, 5)), n, 1e4)
        a, f = dilation_gradient(P), dilation_gradient_fd(P)
        worst = max(worst, np.linalg.norm(a - f) / np.linalg.norm(f))
    assert worst <= 1e-6


def test_gradient_homogeneity(rng):
    # K is 0-homogeneous and invariant under P -> P R, so K_P : P = 0 and K_P^T P is symmetric
    for shape in [(2, 2), (3, 2), (4, 3)]:
        P = random_immersion(rng, *shape)
        G = dilation_gradient(P)
        assert abs(np.sum(G * P)) < 1e-12 * np.linalg.norm(G) * np.linalg.norm(P)
        A = P.T @ G
        assert np.allclose(A, A.T, atol=1e-12)


def test_reduced_hessian_projected(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 4))
        P = random_immersion(rng, int(rng.integers(n, 5)), n, 1e3)
        proj = projections(dilation_gradient(P)).proj_null
        full = dilation_hessian_fd(P)
        red = dilation_hessian_reduced(P)
        diff = np.einsum("ac,cibj->aibj", proj, red - full)
        worst = max(worst, np.linalg.norm(diff) / np.linalg.norm(full))
    assert worst <= 1e-5


def test_reduced_hessian_full_at_conformal(rng):
    # K_P = 0 there, so nothing is projected away
    for N, n in [(2, 2), (3, 2), (3, 3)]:
        Q, _ = np.linalg.qr(rng.standard_normal((N, n)))
        full = dilation_hessian_fd(1.3 * Q)
        red = dilation_hessian_reduced(1.3 * Q)
        assert np.linalg.norm(red - full) <= 1e-6 * np.linalg.norm(full)
        assert kp_projections(1.3 * Q).eps_rank == 0


def test_remainder_lies_in_kp_range(rng):
    # full - reduced = K_P (x) A for some A
    P = random_immersion(rng, 4, 2)
    kp = dilation_gradient(P)
    rem = (dilation_hessian_fd(P) - dilation_hessian_reduced(P)).reshape(4, -1)
    coef, *_ = np.linalg.lstsq(kp, rem, rcond=None)
    assert np.linalg.norm(kp @ coef - rem) <= 1e-6 * np.linalg.norm(rem)


def test_hessian_fd_symmetric(rng):
    P = random_immersion(rng, 3, 2)
    H = dilation_hessian_fd(P)
    assert np.allclose(H, H.transpose(2, 3, 0, 1), atol=1e-8)


def test_fd_stencil_leaving_s_plus():
    P = np.array([[1.0, 0.0], [0.0, 1e-7]])
    with pytest.raises(DomainViolation):
        dilation_hessian_fd(P, h=1e-3)


def test_square_identity(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 4))
        worst = max(worst, identity_n_equals_N(random_immersion(rng, n, n, 1e2)))
    assert worst <= 1e-9


def test_dilation_jet_consistent(rng):
    P = random_immersion(rng, 3, 2)
    j = dilation_jet(P)
    assert j.k == dilation(P)
    assert np.array_equal(j.k_p, dilation_gradient(P))
    assert j.k_pp_reduced.shape == (3, 2, 3, 2)
