"""Dense per-pixel priority maps and their aggregation over square boxes.

Box scores are computed from a summed-area table (integral image) so that every
candidate box costs four lookups regardless of its width.
"""

import numpy as np

from boxquery._validation import check_prob_map, check_same_shape, check_scalar_map


def entropy_map(p):
    """Pixel-wise Shannon entropy normalized by ``ln(c)`` so values lie in [0, 1].

    Zero probabilities contribute nothing (``0 * ln 0 = 0``).
    """
    p = check_prob_map(p)
    n_classes = p.shape[2]
    p64 = p.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p64 > 0, p64 * np.log(p64), 0.0)
    h = -terms.sum(axis=2) / np.log(n_classes)
    return np.clip(h, 0.0, 1.0).astype(np.float32)


def mask_labeled(m, labeled):
    """Zero out the priority of pixels that already carry a label."""
    m = check_scalar_map(m)
    labeled = np.asarray(labeled, dtype=bool)
    check_same_shape(m, labeled, "map and labeled mask")
    return np.where(labeled, np.zeros((), dtype=m.dtype), m)


def build_sat(m):
    """Summed-area table with a zero first row and column.

    ``sat[i, j]`` is the sum of ``m[:i, :j]``; accumulation is done in float64.
    """
    m = check_scalar_map(m)
    h, w = m.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(m, axis=0, dtype=np.float64), axis=1, out=sat[1:, 1:])
    return sat


def box_sum(sat, anchor, b):
    """Sum of the source map over the ``b x b`` box whose top-left pixel is ``anchor``."""
    r, c = anchor
    h, w = sat.shape[0] - 1, sat.shape[1] - 1
    if b < 1 or r < 0 or c < 0 or r + b > h or c + b > w:
        raise IndexError(f"box at {anchor} with width {b} exceeds map of shape {(h, w)}")
    return float(sat[r + b, c + b] - sat[r, c + b] - sat[r + b, c] + sat[r, c])


def anchor_grid(shape, b, stride):
    """Row and column anchor coordinates of all boxes that fit inside ``shape``."""
    h, w = shape
    if b < 1 or b > min(h, w):
        raise ValueError(f"box width {b} does not fit a map of shape {(h, w)}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return np.arange(0, h - b + 1, stride), np.arange(0, w - b + 1, stride)


def box_sums(sat, b, stride=1):
    """Raw box sums for every anchor on the stride grid (float64)."""
    rows, cols = anchor_grid((sat.shape[0] - 1, sat.shape[1] - 1), b, stride)
    r0, c0 = rows[:, None], cols[None, :]
    return sat[r0 + b, c0 + b] - sat[r0, c0 + b] - sat[r0 + b, c0] + sat[r0, c0]


def aggregate_boxes(m, b, stride=1):
    """Mean of ``m`` over every ``b x b`` box anchored on the stride grid.

    Output has shape ``((H - b) // stride + 1, (W - b) // stride + 1)``; entry
    ``[i, j]`` belongs to the box with top-left pixel ``(i * stride, j * stride)``.
    """
    sums = box_sums(build_sat(m), b, stride)
    return (sums / float(b * b)).astype(np.float32)

