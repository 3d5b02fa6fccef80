"""Small input-checking helpers shared across modules."""

from collections import Counter

import numpy as np

from .exceptions import InputValidationError


def check_array(x, *, ndim=None, name="array", nonnegative=False, dtype=np.float64):
    """Convert ``x`` to a float ndarray and verify shape/finiteness."""
    try:
        arr = np.asarray(x, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise InputValidationError(f"{name}: not convertible to {np.dtype(dtype).name}") from exc
    if ndim is not None and arr.ndim != ndim:
        raise InputValidationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputValidationError(f"{name}: contains non-finite values")
    if nonnegative and np.any(arr < 0):
        raise InputValidationError(f"{name}: contains negative values")
    return arr


def check_unique(items, name="ids"):
    items = [str(i) for i in items]
    dups = sorted(k for k, c in Counter(items).items() if c > 1)
    if dups:
        raise InputValidationError(f"{name}: duplicate entries {dups[:10]}")
    return items


def check_binary_labels(y, name="labels"):
    arr = np.asarray(y)
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        raise InputValidationError(f"{name}: expected values in {{0, 1}}")
    return arr.astype(np.int64)


def check_probabilities(p, name="prob"):
    arr = check_array(p, ndim=1, name=name)
    if np.any((arr < 0) | (arr > 1)):
        raise InputValidationError(f"{name}: values outside [0, 1]")
    return arr
