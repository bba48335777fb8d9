"""Input validation helpers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DomainError


def check_cube(values, dtype=(np.float64, np.float32), copy=False) -> np.ndarray:
    """Validate a ``(rows, cols, bands)`` radiance array."""
    arr = check_array(values, dtype=dtype, allow_nd=True, ensure_2d=False, copy=copy,
                      ensure_all_finite=True)
    if arr.ndim != 3:
        raise DomainError(f"expected a (rows, cols, bands) cube, got shape {arr.shape}")
    return arr


def check_grid(values, name="grid", dtype=np.float64, finite=True) -> np.ndarray:
    """Validate a 2-D raster."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_mask(values, name="mask") -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def check_probability(p, name="threshold", open_interval=True) -> float:
    p = float(p)
    ok = 0.0 < p < 1.0 if open_interval else 0.0 <= p <= 1.0
    if not ok:
        raise DomainError(f"{name} must lie in {'(0, 1)' if open_interval else '[0, 1]'}, got {p}")
    return p


def check_nonnegative(x, name="value"):
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} must be finite and non-negative")
    return arr
