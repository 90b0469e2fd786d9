"""Input validation helpers shared by the estimators and volume operations."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array


class FetalSampError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(FetalSampError, ValueError):
    """Raised when an argument violates an operation's preconditions."""


class VolumeIOError(FetalSampError, OSError):
    """Raised when a volume file cannot be read or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def check_matrix(X, *, n_features=None, min_samples=1, name="X"):
    """Validate a 2-D finite float matrix and return it as float64."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True,
                    ensure_min_samples=1)
    if X.shape[0] < min_samples:
        raise InvalidInputError(
            f"{name} needs at least {min_samples} rows, got {X.shape[0]}")
    if n_features is not None and X.shape[1] != n_features:
        raise InvalidInputError(
            f"{name} has {X.shape[1]} columns, expected {n_features}")
    return X


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise InvalidInputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_same_grid(a, b, what="volumes"):
    """Check two volumes (anything with .shape and .affine) share one voxel grid."""
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidInputError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not np.allclose(a.affine.matrix, b.affine.matrix, atol=1e-6):
        raise InvalidInputError(f"{what} differ in affine")


def check_mask_pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask grids differ: {a.shape} vs {b.shape}")
    return a, b
