"""Kernel backend selection.

The hot loops (counter-based hashing, Gray-code enumeration, popcount
histograms) exist twice: a numba ``@njit`` version and a pure-numpy version.
``FLLAB_BACKEND=numpy`` forces the numpy path; the default is numba when it
imports cleanly.
"""

import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_ENV = "FLLAB_BACKEND"


def default_backend():
    choice = os.environ.get(_ENV, "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba" and not HAVE_NUMBA:
        raise RuntimeError(f"{_ENV}=numba requested but numba is not importable")
    return "numba" if HAVE_NUMBA else "numpy"


def resolve(backend=None):
    """Return a concrete backend name for an optional override."""
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend

