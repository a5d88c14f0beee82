"""Central finite-difference verification for hand-written backward passes."""

from __future__ import annotations

import numpy as np


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Run in float64; finite differences are unreliable in float32.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = float(f(x))
        x.flat[i] = orig - h
        fm = float(f(x))
        x.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_check(f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    numeric = numeric_gradient(f, x, h)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"gradient shape {analytic.shape} != point shape {numeric.shape}")
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
