from __future__ import annotations

import numpy as np
import pytest

from qcinf import _accel

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    if request.param == "numba" and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    prev = _accel.set_numba(request.param == "numba")
    yield request.param
    _accel.set_numba(prev)


def random_immersion(rng, N, n, max_cond=1e3):
    while True:
        P = rng.standard_normal((N, n))
        s = np.linalg.svd(P, compute_uv=False)
        if (s[0] / s[-1]) ** 2 < max_cond:
            return P


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
