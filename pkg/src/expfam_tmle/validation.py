"""Input checks shared by the estimator classes and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataValidationError


def check_covariates(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """2-D finite float array with at least ``min_rows`` rows."""
    try:
        X = check_array(X, dtype=float, ensure_2d=False, ensure_min_samples=min_rows)
    except ValueError as exc:
        raise DataValidationError(f"{name}: {exc}") from exc
    return X[:, None] if X.ndim == 1 else X


def check_vector(v, n: int, name: str, allow_nan: bool = False) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise DataValidationError(f"{name} has {v.shape[0]} entries, expected {n}")
    bad = ~np.isfinite(v) & ~(allow_nan & np.isnan(v))
    if bad.any():
        raise DataValidationError(f"{name} has non-finite entries at rows {np.flatnonzero(bad)[:5].tolist()}")
    return v


def check_binary(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    observed = v[~np.isnan(v)]
    if not np.all(np.isin(observed, (0.0, 1.0))):
        raise DataValidationError(f"{name} must contain only 0 and 1")
    return v
