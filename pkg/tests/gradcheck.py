"""Central finite-difference gradient oracle shared by the test suite.

Independent of the reverse-mode code: it only calls the scalar-valued forward
function the caller supplies.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

REL_TOL = 1e-4
ABS_TOL = 1e-6


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences, perturbing x in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = f()
        flat[k] = orig - eps
        lo = f()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2.0 * eps)
    return g


def assert_grads_close(
    analytic: np.ndarray,
    numeric: np.ndarray,
    context: str = "",
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
) -> None:
    """Relative tolerance 1e-4, absolute 1e-6 where the reference is near zero."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape, f"{context}: {analytic.shape} vs {numeric.shape}"
    denom = np.maximum(np.abs(numeric), np.abs(analytic))
    err = np.abs(analytic - numeric)
    ok = (err <= abs_tol) | (err <= rel_tol * denom)
    if not np.all(ok):
        worst = np.unravel_index(np.argmax(err / np.maximum(denom, 1e-12)), err.shape)
        raise AssertionError(
            f"{context}: gradient mismatch at {worst}: "
            f"analytic={analytic[worst]:.10g} numeric={numeric[worst]:.10g}"
        )


def directional_gradient(
    f: Callable[[], float], x: np.ndarray, direction: np.ndarray, eps: float = 1e-6
) -> float:
    """d f(x + t * direction) / d t at t = 0, for tensors too large to probe
    element by element."""
    x += eps * direction
    hi = f()
    x -= 2.0 * eps * direction
    lo = f()
    x += eps * direction
    return (hi - lo) / (2.0 * eps)
