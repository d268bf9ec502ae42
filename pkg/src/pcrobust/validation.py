"""Input validation helpers for arrays crossing the public API."""

import numpy as np

from .errors import ShapeMismatchError


def check_points(points, name="points"):
    """Validate a single cloud as an (n, 3) float array and return it.

    Accepts anything array-like; does not copy when the input already is a
    float32/float64 C-contiguous array of the right shape.
    """
    arr = np.asarray(points)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatchError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ShapeMismatchError(f"{name} must contain at least one point")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(arr)


def check_cloud_batch(X, name="X"):
    """Validate a batch of equal-size clouds as a (B, n, 3) float array."""
    if isinstance(X, (list, tuple)):
        sizes = {np.asarray(c).shape for c in X}
        if len(sizes) > 1:
            raise ShapeMismatchError(
                f"{name}: all clouds in a batch must have the same shape, got {sorted(sizes)}")
        X = np.stack([check_points(c, name) for c in X])
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"{name} must have shape (B, n, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(arr)


def check_labels(y, n_classes, name="y"):
    """Validate integer labels in [0, n_classes)."""
    arr = np.asarray(y)
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.all(rounded == arr):
            raise ValueError(f"{name} must be integer class ids")
        arr = rounded.astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name} has labels outside [0, {n_classes})")
    return arr


def check_feature_map(F, name="F"):
    """Validate an (n, d) feature matrix."""
    arr = np.asarray(F)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr
