"""Dense inner-loop kernels with two interchangeable backends.

The numba backend compiles per-element loops; the numpy backend expresses
the same loops with vectorized semantics chosen so both produce bit-equal
results.  Selection order: the ``NEUDA_KERNELS`` environment variable
(``auto`` | ``numba`` | ``numpy``, default ``auto``), overridable at runtime
via :func:`set_backend` (used by tests and the benchmark).  ``auto`` means
numba when it imports, numpy otherwise.
"""

import os

from . import numpy_impl

try:
    from . import numba_impl
    _HAVE_NUMBA = True
except ImportError:
    numba_impl = None
    _HAVE_NUMBA = False

_env = os.environ.get("NEUDA_KERNELS", "auto").strip().lower()
if _env not in ("auto", "numba", "numpy"):
    raise ValueError(f"NEUDA_KERNELS must be auto|numba|numpy, got {_env!r}")
if _env == "numba" and not _HAVE_NUMBA:
    raise ImportError("NEUDA_KERNELS=numba but numba is not importable")

_backend = _env


def available_backends():
    return ["numba", "numpy"] if _HAVE_NUMBA else ["numpy"]


def set_backend(name):
    global _backend
    name = name.strip().lower()
    if name not in ("auto", "numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name


def get_backend():
    if _backend == "auto":
        return "numba" if _HAVE_NUMBA else "numpy"
    return _backend


def _impl():
    return numba_impl if get_backend() == "numba" else numpy_impl


def scatter_add_rows(out, idx, vals):
    """out[idx[i], :] += vals[i, :], repeats accumulated in index order."""
    return _impl().scatter_add_rows(out, idx, vals)


def sphere_trace(origins, dirs, near, far, kind, params, max_steps=256, eps=1e-4):
    """March each ray by its SDF value; returns (hit flags, final depths)."""
    return _impl().sphere_trace(origins, dirs, near, far, int(kind), params,
                                int(max_steps), float(eps))


def marching_cubes(values):
    """Triangulate the zero crossing of a sampled field.

    ``values`` has lattice shape (nx+1, ny+1, nz+1); returns a float64
    triangle soup (T, 3, 3) in index coordinates, outward-oriented for
    negative-inside fields.
    """
    return _impl().marching_cubes(values)
