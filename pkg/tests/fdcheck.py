"""Central finite-difference gradient checks shared by the test modules."""
import numpy as np

STEP = 1e-5
RTOL = 1e-4
SMALL = 1e-8


def numeric_grad(f, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``arr`` (modified in place, then restored)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, small: float = SMALL) -> float:
    """Largest elementwise relative error, skipping entries with |analytic| < small."""
    keep = np.abs(analytic) >= small
    if not keep.any():
        return float(np.max(np.abs(numeric))) if numeric.size else 0.0
    a, n = analytic[keep], numeric[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))
