"""Analytic signed distance fields for the synthetic scenes.

Three primitives, all sized to sit inside the unit box [-1,1]^3: a sphere,
a torus (ring in the xy plane), and a box with a cylindrical hole drilled
along z.  The vectorized evaluators here share their floating-point
expression structure with the scalar forms compiled inside the trace
kernel, so oracle comparisons across code paths hold bitwise.
"""

import numpy as np

from . import kernels
from .kernels import numpy_impl

KIND_IDS = {"sphere": 0, "torus": 1, "box_with_hole": 2}

DEFAULT_PARAMS = {
    "sphere": {"radius": 0.35},
    "torus": {"major": 0.5, "minor": 0.2},
    "box_with_hole": {"half": 0.4, "hole": 0.15},
}

_PARAM_ORDER = {
    "sphere": ("radius",),
    "torus": ("major", "minor"),
    "box_with_hole": ("half", "hole"),
}


def params_vector(kind, params=None):
    if kind not in _PARAM_ORDER:
        raise ValueError(f"unknown primitive {kind!r}; choose from {sorted(KIND_IDS)}")
    merged = dict(DEFAULT_PARAMS[kind])
    params = params or {}
    extra = set(params) - set(merged)
    if extra:
        raise ValueError(f"unknown {kind} parameters: {sorted(extra)}")
    merged.update(params)
    return np.array([merged[k] for k in _PARAM_ORDER[kind]], dtype=np.float64)


def make_sdf(kind, params=None):
    """Vectorized evaluator: (N, 3) points -> (N,) signed distances."""
    vec = params_vector(kind, params or {})
    kid = KIND_IDS[kind]

    def f(points):
        points = np.asarray(points, dtype=np.float64)
        flat = points.reshape(-1, 3)
        vals = numpy_impl._sdf_values(kid, vec, flat[:, 0], flat[:, 1], flat[:, 2])
        return vals.reshape(points.shape[:-1])

    return f


def sdf_gradient(f, points, h=1e-6):
    """Central-difference gradient of a vectorized field, one axis at a time."""
    points = np.asarray(points, dtype=np.float64)
    grad = np.zeros_like(points)
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = h
        grad[..., ax] = (f(points + dp) - f(points - dp)) / (2.0 * h)
    return grad


def trace_rays(kind, params, origins, dirs, near, far, max_steps=256, eps=1e-4):
    """Sphere-trace rays against a primitive; delegates to the active kernel."""
    vec = params_vector(kind, params or {})
    return kernels.sphere_trace(origins, dirs, near, far, KIND_IDS[kind], vec,
                                max_steps=max_steps, eps=eps)
