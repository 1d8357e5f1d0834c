"""Numba switch.

Hot kernels are written once in loop form and compiled with ``njit`` when
numba is importable and ``QCINF_NUMBA`` is not set to ``0``. Every kernel
module also carries a vectorised numpy twin; :func:`use_numba` decides which
one the public dispatchers call.
"""
from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAS_NUMBA = _numba is not None

_enabled = HAS_NUMBA and os.environ.get("QCINF_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def use_numba() -> bool:
    return _enabled


def set_numba(flag: bool) -> bool:
    """Select the backend at runtime; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and HAS_NUMBA
    return prev


def backend_name() -> str:
    return "numba" if _enabled else "numpy"
