"""Input validation helpers shared by the estimators and functional API."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import NotFittedError


def check_points(X, name="X", min_samples=1):
    """Return ``X`` as a finite float64 2-D array or raise ``ValueError``."""
    try:
        return check_array(
            X,
            dtype=np.float64,
            ensure_2d=True,
            ensure_min_samples=min_samples,
            ensure_all_finite=True,
            input_name=name,
        )
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from None


def check_same_width(X, Y, names=("X", "Y")):
    if X.shape[1] != Y.shape[1]:
        raise ValueError(
            f"dimension mismatch: {names[0]} has {X.shape[1]} columns, "
            f"{names[1]} has {Y.shape[1]}"
        )


def check_aligned(X, Y, names=("source", "transported")):
    if X.shape != Y.shape:
        raise ValueError(
            f"{names[0]} {X.shape} and {names[1]} {Y.shape} must be row-aligned"
        )


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_is_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )
