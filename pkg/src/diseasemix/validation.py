"""Small input-validation helpers used by the estimators and stats functions."""

import numpy as np

from .errors import DataError

__all__ = [
    "as_float_matrix",
    "check_counts_matrix",
    "check_simplex_rows",
    "check_positive",
]


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def check_counts_matrix(counts, name: str = "counts") -> np.ndarray:
    """Coerce to a 2-D non-negative integer array."""
    arr = np.asarray(counts)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        as_int = np.asarray(arr, dtype=np.int64)
        if arr.size and not np.array_equal(as_int, arr):
            raise DataError(f"{name} must contain integers")
        arr = as_int
    else:
        arr = arr.astype(np.int64, copy=False)
    if arr.size and arr.min() < 0:
        raise DataError(f"{name} must be non-negative")
    return arr


def check_simplex_rows(arr, name: str = "rows", tol: float = 1e-9) -> np.ndarray:
    arr = as_float_matrix(arr, name)
    if arr.size and arr.min() < -tol:
        raise DataError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    if arr.size and np.max(np.abs(sums - 1.0)) > tol:
        raise DataError(f"{name} rows must sum to 1 within {tol}")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise DataError(f"{name} must be positive, got {value}")
    return value
