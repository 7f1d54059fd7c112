"""Input validation helpers shared by the estimators and map operations."""

import numpy as np

PROB_ATOL = 1e-3


class DataError(ValueError):
    """Raised for malformed input data (files, maps, masks)."""


def check_prob_map(p, atol=PROB_ATOL, name="prob map"):
    """Validate an (H, W, C) probability tensor and return it as float32."""
    p = np.asarray(p)
    if p.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {p.shape}")
    if p.shape[2] < 2:
        raise ValueError(f"{name} needs at least 2 classes, got {p.shape[2]}")
    p = p.astype(np.float32, copy=False)
    if not np.all(np.isfinite(p)) or p.min(initial=0.0) < -atol or p.max(initial=0.0) > 1 + atol:
        raise ValueError(f"{name} values must lie in [0, 1]")
    sums = p.astype(np.float64) @ np.ones(p.shape[2])
    if sums.size and np.abs(sums - 1.0).max() > atol:
        raise ValueError(f"{name} class vectors must sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")
    return p


def check_scalar_map(m, name="map"):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def check_mask(mask, name="mask"):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError(f"{name} must hold integer class ids, got {mask.dtype}")
    return mask


def check_same_shape(a, b, what="inputs"):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise ValueError(f"{what} differ in shape: {np.shape(a)[:2]} vs {np.shape(b)[:2]}")
