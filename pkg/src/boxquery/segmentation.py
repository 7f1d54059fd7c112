"""Segments of a predicted mask: labeling, contours, segment-wise IoU and mIoU.

A segment is a maximal 8-connected set of pixels sharing one class id.
Enclosed background is detected with the complementary 4-connectivity.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from boxquery._validation import check_mask, check_prob_map, check_same_shape

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)

# Moore neighbourhood in clockwise order (rows grow downwards), starting west.
_OFFSETS = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIRECTION = {off: k for k, off in enumerate(_OFFSETS)}
_WEST, _SOUTH = 0, 6


@dataclass(frozen=True, eq=False)
class Segment:
    """One connected component of a segmentation mask.

    ``runs`` is an ``(n, 3)`` array of ``(row, col_start, length)`` horizontal runs
    in raster order.
    """

    id: int
    cls: int
    runs: np.ndarray
    size: int
    n_boundary: int
    bbox: tuple

    def coords(self):
        """Row and column index arrays of all pixels."""
        lengths = self.runs[:, 2]
        rows = np.repeat(self.runs[:, 0], lengths)
        offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        cols = np.repeat(self.runs[:, 1], lengths) + offsets
        return rows, cols

    def to_mask(self, shape):
        out = np.zeros(shape, dtype=bool)
        out[self.coords()] = True
        return out

    @property
    def n_interior(self):
        return self.size - self.n_boundary


def argmax_mask(p):
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    p = check_prob_map(p)
    n_classes = p.shape[2]
    dtype = np.uint8 if n_classes <= 255 else np.uint16
    return np.argmax(p, axis=2).astype(dtype)


def _row_runs(labels):
    """All horizontal runs of equal label, as (label, row, col, length) arrays."""
    h, w = labels.shape
    change = np.ones((h, w), dtype=bool)
    change[:, 1:] = labels[:, 1:] != labels[:, :-1]
    rows, cols = np.nonzero(change)
    flat_start = rows * w + cols
    flat_end = np.append(flat_start[1:], h * w)
    # a run never extends past its row end
    ends = np.minimum(flat_end, (rows + 1) * w)
    return labels[rows, cols], rows, cols, ends - flat_start


def boundary_pixels(labels):
    """Pixels with a 4-neighbour carrying another label or lying outside the image."""
    padded = np.pad(labels, 1, constant_values=np.iinfo(labels.dtype).min)
    centre = padded[1:-1, 1:-1]
    return (
        (padded[:-2, 1:-1] != centre)
        | (padded[2:, 1:-1] != centre)
        | (padded[1:-1, :-2] != centre)
        | (padded[1:-1, 2:] != centre)
    )


def label_segments(mask, ignore_id=None):
    """Label the 8-connected same-class components of ``mask``.

    Returns ``(labels, segments)`` where ``labels`` holds the segment id per pixel
    (``-1`` for ignored pixels) and segment ids follow the raster order of each
    segment's first pixel.
    """
    mask = check_mask(mask)
    h, w = mask.shape
    raw = np.full((h, w), -1, dtype=np.int32)
    n_total = 0
    classes = np.unique(mask)
    for k in classes:
        if ignore_id is not None and k == ignore_id:
            continue
        lab, n = ndimage.label(mask == k, structure=EIGHT)
        sel = lab > 0
        raw[sel] = lab[sel] - 1 + n_total
        n_total += n
    if n_total == 0:
        return raw, []

    flat = raw.ravel()
    valid = flat >= 0
    first = np.full(n_total, h * w, dtype=np.int64)
    np.minimum.at(first, flat[valid], np.flatnonzero(valid))
    order = np.argsort(first, kind="stable")
    remap = np.empty(n_total, dtype=np.int32)
    remap[order] = np.arange(n_total, dtype=np.int32)
    labels = np.where(raw >= 0, remap[np.maximum(raw, 0)], -1).astype(np.int32)

    bd = boundary_pixels(labels) & (labels >= 0)
    sizes = np.bincount(labels[labels >= 0], minlength=n_total)
    n_bd = np.bincount(labels[bd], minlength=n_total)

    run_lab, run_r, run_c, run_len = _row_runs(labels)
    keep = run_lab >= 0
    run_lab, run_r, run_c, run_len = run_lab[keep], run_r[keep], run_c[keep], run_len[keep]
    run_order = np.argsort(run_lab, kind="stable")
    bounds = np.searchsorted(run_lab[run_order], np.arange(n_total + 1))

    rr, cc = np.nonzero(labels >= 0)
    lab_px = labels[rr, cc]
    rmin = np.full(n_total, h); rmax = np.full(n_total, -1)
    cmin = np.full(n_total, w); cmax = np.full(n_total, -1)
    np.minimum.at(rmin, lab_px, rr); np.maximum.at(rmax, lab_px, rr)
    np.minimum.at(cmin, lab_px, cc); np.maximum.at(cmax, lab_px, cc)

    segments = []
    for sid in range(n_total):
        idx = run_order[bounds[sid]:bounds[sid + 1]]
        runs = np.stack([run_r[idx], run_c[idx], run_len[idx]], axis=1).astype(np.int64)
        r0, c0 = int(rmin[sid]), int(cmin[sid])
        segments.append(Segment(
            id=sid,
            cls=int(mask[runs[0, 0], runs[0, 1]]),
            runs=runs,
            size=int(sizes[sid]),
            n_boundary=int(n_bd[sid]),
            bbox=(r0, c0, int(rmax[sid]) - r0 + 1, int(cmax[sid]) - c0 + 1),
        ))
    return labels, segments


def connected_components(mask, ignore_id=None):
    """Maximal 8-connected same-class segments in raster order of their first pixel."""
    return label_segments(mask, ignore_id)[1]


def relabel(segments, shape):
    """Paint segments back into a class mask (inverse of ``connected_components``)."""
    out = np.zeros(shape, dtype=np.int64)
    for seg in segments:
        out[seg.coords()] = seg.cls
    return out


def _moore_trace(fg, start, backtrack):
    """Follow the border of ``fg`` from ``start`` keeping background on the left.

    ``fg`` must be padded so that no step leaves the array. Stops when the first
    transition repeats.
    """
    path = [start]
    cur, d = start, backtrack
    first_next = None
    limit = 4 * fg.size + 8
    for _ in range(limit):
        nxt = None
        for k in range(1, 9):
            idx = (d + k) % 8
            dr, dc = _OFFSETS[idx]
            cand = (cur[0] + dr, cur[1] + dc)
            if fg[cand]:
                prev = _OFFSETS[(idx - 1) % 8]
                back = (cur[0] + prev[0] - cand[0], cur[1] + prev[1] - cand[1])
                nxt, d = cand, _DIRECTION[back]
                break
        if nxt is None:
            return path  # isolated pixel
        if first_next is None:
            first_next = nxt
        elif cur == start and nxt == first_next:
            path.pop()
            return path
        path.append(nxt)
        cur = nxt
    raise RuntimeError("contour tracing did not terminate")


def trace_contours(seg, mask=None):
    """Closed boundary paths of a segment: outer contour first, then one per hole.

    Each path is an ``(n, 2)`` array of global ``(row, col)`` pixel coordinates.
    The closing step back to the first pixel is implied, not repeated. ``mask``
    is accepted for interface symmetry; the segment's own pixels define it.
    """
    r0, c0, h, w = seg.bbox
    fg = np.zeros((h + 2, w + 2), dtype=bool)
    rows, cols = seg.coords()
    fg[rows - r0 + 1, cols - c0 + 1] = True
    if mask is not None:
        cls_match = np.asarray(mask)[rows, cols] == seg.cls
        if not cls_match.all():
            raise ValueError("segment is inconsistent with the mask")

    start = (int(seg.runs[0, 0]) - r0 + 1, int(seg.runs[0, 1]) - c0 + 1)
    paths = [_moore_trace(fg, start, _WEST)]

    # enclosing even one pixel takes at least four
    holes, n_holes = ndimage.label(~fg, structure=FOUR) if seg.size >= 4 else (None, 1)
    if n_holes > 1:
        outside = holes[0, 0]
        found = ndimage.find_objects(holes)
        for lab in range(1, n_holes + 1):
            if lab == outside:
                continue
            sl = found[lab - 1]
            sub = holes[sl] == lab
            hr, hc = np.argwhere(sub)[0]
            hr, hc = hr + sl[0].start, hc + sl[1].start
            paths.append(_moore_trace(fg, (hr - 1, hc), _SOUTH))

    offset = np.array([r0 - 1, c0 - 1])
    return [np.asarray(p, dtype=np.int64).reshape(-1, 2) + offset for p in paths]


def segment_ious(segments, gt, ignore_id=None):
    """Segment-wise IoU against the ground-truth components each segment touches.

    For a predicted segment ``K`` of class ``k`` the denominator is the union of
    ``K`` with every ground-truth component of class ``k`` intersecting ``K``.
    Pixels whose ground truth is ``ignore_id`` are left out entirely.
    """
    gt = check_mask(gt, "ground truth")
    if not segments:
        return np.zeros(0)
    gt_labels, gt_segments = label_segments(gt, ignore_id)
    gt_sizes = np.array([s.size for s in gt_segments], dtype=np.int64)
    gt_cls = np.array([s.cls for s in gt_segments], dtype=np.int64)
    ious = np.zeros(len(segments))
    for i, seg in enumerate(segments):
        rows, cols = seg.coords()
        if rows.size and (rows.max() >= gt.shape[0] or cols.max() >= gt.shape[1]):
            raise ValueError("segment lies outside the ground-truth mask")
        under = gt_labels[rows, cols]
        valid = under >= 0
        n_valid = int(valid.sum())
        hit = under[valid]
        hit = hit[gt_cls[hit] == seg.cls]
        if hit.size == 0:
            continue
        inter = hit.size
        touched = np.unique(hit)
        union = n_valid + int(gt_sizes[touched].sum()) - inter
        ious[i] = inter / union
    return ious


def segment_iou(seg, gt, ignore_id=None):
    return float(segment_ious([seg], gt, ignore_id)[0])


class ConfusionAccumulator:
    """Accumulates a class confusion matrix across images for dataset-level mIoU."""

    def __init__(self, n_classes, ignore_id=None):
        self.n_classes = n_classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred = check_mask(pred, "prediction")
        gt = check_mask(gt, "ground truth")
        check_same_shape(pred, gt, "prediction and ground truth")
        keep = np.ones(gt.shape, dtype=bool) if self.ignore_id is None else gt != self.ignore_id
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.n_classes or p.max() >= self.n_classes):
            raise ValueError("class id exceeds the number of classes")
        self.matrix += np.bincount(g * self.n_classes + p, minlength=self.n_classes ** 2).reshape(
            self.n_classes, self.n_classes)
        return self

    def class_ious(self):
        inter = np.diag(self.matrix).astype(np.float64)
        union = self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, inter / union, np.nan)

    def mean_iou(self):
        ious = self.class_ious()
        if np.all(np.isnan(ious)):
            return 0.0
        return float(np.nanmean(ious))


def mean_iou(pred, gt, n_classes=None, ignore_id=None):
    """Dataset-level mIoU; ``pred`` and ``gt`` are masks or equal-length sequences of masks.

    Intersections and unions are summed over all images before averaging over
    the classes with non-empty union.
    """
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise ValueError("prediction and ground-truth lists differ in length")
    if n_classes is None:
        top = 0
        for p, g in zip(pred, gt):
            g = np.asarray(g)
            g = g[g != ignore_id] if ignore_id is not None else g
            top = max(top, int(np.max(p, initial=0)), int(np.max(g, initial=0)))
        n_classes = top + 1
    acc = ConfusionAccumulator(n_classes, ignore_id)
    for p, g in zip(pred, gt):
        acc.update(p, g)
    return acc.mean_iou()
