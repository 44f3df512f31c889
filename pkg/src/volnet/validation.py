"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def check_volumes(x, dtype=np.float32) -> np.ndarray:
    """Coerce volumes to a finite (n, 1, D, H, W) array.

    Accepts (n, D, H, W) or (n, 1, D, H, W); anything else is an error.
    """
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 4:
        x = x[:, None, :, :, :]
    if x.ndim != 5:
        raise ShapeError(f"expected volumes shaped (n, D, H, W) or "
                         f"(n, 1, D, H, W), got {x.shape}")
    if x.shape[1] != 1:
        raise ShapeError(f"expected a single channel, got {x.shape[1]}")
    if x.size and not np.all(np.isfinite(x)):
        raise ValueError("volumes contain NaN or Inf")
    return x


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError(f"expected exactly 2 classes, found {classes.tolist()}")
    return y


def zscore_volumes(x: np.ndarray) -> np.ndarray:
    """Per-volume z-score over all voxels; constant volumes become zeros."""
    flat = x.reshape(len(x), -1)
    mean = flat.mean(axis=1, dtype=np.float64)
    std = flat.std(axis=1, dtype=np.float64)
    std = np.where(std < 1e-12, 1.0, std)
    out = (flat - mean[:, None]) / std[:, None]
    return out.reshape(x.shape).astype(x.dtype)
