"""Backend selection for the numba-compiled kernels.

Kernels are compiled with numba when it is importable; setting the
environment variable ``DCSEP_DISABLE_NUMBA=1`` routes every call to the
pure-numpy implementations instead. The flag is read at call time.
"""

from __future__ import annotations

import os

DISABLE_ENV = "DCSEP_DISABLE_NUMBA"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get(DISABLE_ENV, "").lower() not in ("1", "true", "yes")


def resolve(backend: str | None) -> str:
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
