"""Input validation helpers shared by every module."""

import numpy as np

from .exceptions import DegenerateInputError, DimensionError, InvalidParameterError


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a 2-D float64 C-contiguous array with finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.size and not np.isfinite(arr).all():
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def as_vector(x, name="vector"):
    """Coerce ``x`` to a 1-D float64 array with finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if arr.size and not np.isfinite(arr).all():
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def as_count(x, name="count", minimum=1):
    """Coerce ``x`` to a plain int, requiring ``x >= minimum``."""
    value = int(x)
    if value != x:
        raise InvalidParameterError(f"{name} must be an integer, got {x!r}")
    if value < minimum:
        raise InvalidParameterError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_same_shape(x, y, xname="x", yname="y"):
    if x.shape != y.shape:
        raise DimensionError(
            f"shape mismatch: {xname} is {x.shape}, {yname} is {y.shape}"
        )
