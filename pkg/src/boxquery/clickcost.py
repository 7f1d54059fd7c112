"""Annotation click estimation and click-based cost accounting.

Estimated clicks come from simplifying predicted segment contours with
Ramer-Douglas-Peucker; true clicks are counted against ground-truth polygons.
Polygon coordinates are ``(x, y)`` in pixels with the origin at the top-left
image corner, so pixel ``(row, col)`` covers ``[col, col + 1] x [row, row + 1]``.
"""

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import pdist

from boxquery._validation import check_mask
from boxquery.gridmaps import box_sum, build_sat
from boxquery.segmentation import Segment, _row_runs, label_segments, trace_contours

DEFAULT_EPSILON = 1.5
_CACHE_SIZE = 24


@dataclass(frozen=True)
class Polygon:
    image_id: str
    cls: int
    vertices: tuple

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError("a polygon needs at least 3 vertices")


@dataclass
class ClickCounts:
    c_p: int = 0
    c_i: int = 0
    c_b: int = 0
    c_c: int = 0

    def __add__(self, other):
        return ClickCounts(self.c_p + other.c_p, self.c_i + other.c_i, self.c_b + other.c_b, self.c_c + other.c_c)


@dataclass
class CostLedger:
    """Running click and pixel totals of one active-learning run.

    ``init_*`` hold the clicks of fully labeled images (initial set and meta set),
    ``query_*`` the clicks of all annotated boxes, ``pool_*`` the totals for
    labeling the whole pool as full images.
    """

    pool_cp: int
    pool_cc: int
    total_pixels: int
    init_cp: int = 0
    init_cc: int = 0
    query_cp: int = 0
    query_ci: int = 0
    query_cb: int = 0
    query_cc: int = 0
    labeled_pixels: int = 0
    history: list = field(default_factory=list, repr=False)

    def add_image(self, c_p, c_c, n_pixels):
        self.init_cp += int(c_p)
        self.init_cc += int(c_c)
        self.labeled_pixels += int(n_pixels)

    def add_box(self, clicks, n_new_pixels):
        self.query_cp += clicks.c_p
        self.query_ci += clicks.c_i
        self.query_cb += clicks.c_b
        self.query_cc += clicks.c_c
        self.labeled_pixels += int(n_new_pixels)

    def to_dict(self):
        d = asdict(self)
        d.pop("history")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compute_costs(ledger):
    """``(cost_A, cost_B, cost_P)`` in percent of labeling the full pool.

    Values above 100 are possible: boxes pay intersection clicks and may split a
    segment into several class clicks.
    """
    if ledger.pool_cp <= 0 or ledger.pool_cp + ledger.pool_cc <= 0 or ledger.total_pixels <= 0:
        raise ValueError("pool totals must be positive")
    num_a = ledger.init_cp + ledger.init_cc + ledger.query_cp + ledger.query_ci + ledger.query_cc
    num_b = ledger.init_cp + ledger.query_cp + ledger.query_ci + ledger.query_cb
    cost_a = 100.0 * num_a / (ledger.pool_cp + ledger.pool_cc)
    cost_b = 100.0 * num_b / ledger.pool_cp
    cost_p = 100.0 * ledger.labeled_pixels / ledger.total_pixels
    return cost_a, cost_b, cost_p


# --- Ramer-Douglas-Peucker ------------------------------------------------------

def _point_line_distance(pts, a, b):
    d = b - a
    norm = np.hypot(d[0], d[1])
    rel = pts - a
    if norm == 0.0:
        return np.hypot(rel[:, 0], rel[:, 1])
    return np.abs(d[0] * rel[:, 1] - d[1] * rel[:, 0]) / norm


def _rdp_open(pts, epsilon):
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        dist = _point_line_distance(pts[lo + 1:hi], pts[lo], pts[hi])
        k = int(np.argmax(dist))
        if dist[k] > epsilon:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((mid, hi))
            stack.append((lo, mid))
    return keep


def _farthest_pair(pts):
    """Indices ``i < j`` of the farthest pair; the lexicographically first on ties."""
    n = len(pts)
    if n <= 2048:
        # condensed order is row-major over i < j, so argmax keeps the first pair
        k = int(np.argmax(pdist(pts, "sqeuclidean")))
        i = int(np.searchsorted(np.cumsum(np.arange(n - 1, 0, -1)), k, side="right"))
        j = k - (i * (2 * n - i - 1)) // 2 + i + 1
        return i, j
    best, best_i, best_j = -1.0, 0, 1
    # chunked to bound memory on long contours
    for start in range(0, n, 512):
        block = pts[start:start + 512]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(start, start + len(block))[:, None]
        d2[np.arange(n)[None, :] <= rows] = -1.0
        k = int(np.argmax(d2))
        i, j = divmod(k, n)
        if d2[i, j] > best:
            best, best_i, best_j = d2[i, j], start + i, j
    return best_i, best_j


def rdp(points, epsilon, closed=False):
    """Simplify a polyline; returns the kept points as an ``(m, 2)`` float array.

    Open curves keep both endpoints and recursively keep the point farthest from
    the chord while that distance exceeds ``epsilon``. Closed curves (given
    without a repeated end point) are cut at their two mutually farthest points
    and both halves are simplified as open curves.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("rdp needs at least 2 points")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if not closed:
        return pts[_rdp_open(pts, epsilon)]
    if len(pts) > 2 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) <= 3:
        return pts.copy()
    i, j = _farthest_pair(pts)
    first = pts[i:j + 1]
    second = np.concatenate([pts[j:], pts[:i + 1]])
    a = first[_rdp_open(first, epsilon)]
    b = second[_rdp_open(second, epsilon)]
    return np.concatenate([a, b[1:-1]])


# --- estimated clicks -----------------------------------------------------------

def _segment_vertices(seg, epsilon):
    """``(row, col)`` pixels holding RDP vertices of all contours of ``seg``."""
    out = []
    for contour in trace_contours(seg):
        if len(contour) < 2:
            out.append(contour)
            continue
        # RDP works on (x, y) = (col, row); vertices are contour pixels
        verts = rdp(contour[:, ::-1], epsilon, closed=True).astype(np.int64)
        out.append(verts[:, ::-1])
    return np.concatenate(out)


@lru_cache(maxsize=4096)
def _pattern_vertices(h, w, bits, epsilon):
    # tracing and RDP commute with integer translation, so small shapes are cached
    fg = np.unpackbits(np.frombuffer(bits, dtype=np.uint8), count=h * w).reshape(h, w).astype(np.int8)
    lab, rows, cols, lengths = _row_runs(fg)
    keep = lab == 1
    runs = np.stack([rows[keep], cols[keep], lengths[keep]], axis=1).astype(np.int64)
    seg = Segment(id=0, cls=1, runs=runs, size=int(fg.sum()), n_boundary=0, bbox=(0, 0, h, w))
    return _segment_vertices(seg, epsilon)


def click_map(mask, epsilon=DEFAULT_EPSILON, ignore_id=None, segments=None):
    """Cost map: 1 on pixels holding an RDP vertex of some segment contour, else 0.

    Segments are visited in id order. A vertex landing within one pixel (8-neighbourhood)
    of a vertex placed by an earlier segment is merged into it, so boundaries shared by two
    segments are not charged twice.
    """
    mask = check_mask(mask)
    if segments is None:
        segments = label_segments(mask, ignore_id)[1]
    kappa = np.zeros(mask.shape, dtype=np.uint8)
    # 3x3 neighbourhoods of vertices already placed by earlier segments (padded by one)
    claimed = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    for seg in segments:
        r0, c0, h, w = seg.bbox
        if seg.size <= _CACHE_SIZE:
            fg = np.zeros((h, w), dtype=bool)
            rows, cols = seg.coords()
            fg[rows - r0, cols - c0] = True
            verts = _pattern_vertices(h, w, np.packbits(fg).tobytes(), float(epsilon)) + (r0, c0)
        else:
            verts = _segment_vertices(seg, epsilon)
        # a corner shared with a neighbouring segment is clicked once
        verts = verts[~claimed[verts[:, 0] + 1, verts[:, 1] + 1]]
        kappa[verts[:, 0], verts[:, 1]] = 1
        for dr in range(3):
            for dc in range(3):
                claimed[verts[:, 0] + dr, verts[:, 1] + dc] = True
    return kappa


def click_priority(mask, epsilon=DEFAULT_EPSILON, ignore_id=None):
    """Priority ``1 - kappa``: zero on estimated click pixels, one elsewhere."""
    return (1 - click_map(mask, epsilon, ignore_id)).astype(np.float32)


def vertex_map(polygons, shape):
    """Cost map built from true polygon vertices (pixel containing each vertex)."""
    h, w = shape
    kappa = np.zeros(shape, dtype=np.uint8)
    for poly in polygons:
        v = np.asarray(poly.vertices, dtype=np.float64)
        cols = np.clip(np.floor(v[:, 0]).astype(np.int64), 0, w - 1)
        rows = np.clip(np.floor(v[:, 1]).astype(np.int64), 0, h - 1)
        kappa[rows, cols] = 1
    return kappa


def estimate_box_clicks(kappa, box, sat=None):
    """Number of estimated click pixels inside ``box = (row, col, b)``."""
    row, col, b = box
    if sat is None:
        sat = build_sat(np.asarray(kappa, dtype=np.float64))
    return int(round(box_sum(sat, (row, col), b)))


# --- true clicks -------------------------------------------------------------------

def _edge_crossings(p0, p1, xmin, xmax, ymin, ymax):
    """Boundary crossings of segment p0-p1 with the closed box (Liang-Barsky).

    A segment that only touches the box in a single point (e.g. grazing a
    corner) does not cross it. Crossing through a corner counts once.
    """
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - xmin), (dx, xmax - p0[0]), (-dy, p0[1] - ymin), (dy, ymax - p0[1])):
        if p == 0:
            if q < 0:
                return 0
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    if t1 <= t0:
        return 0
    return int(t0 > 0.0) + int(t1 < 1.0)


def count_true_clicks(box, polygons, gt, ignore_id=None, fresh=None, gt_labels=None):
    """Clicks needed to annotate ``box = (row, col, b)`` from ground-truth polygons.

    Vertices on the box boundary count as inside (polygon clicks). Every crossing
    of a polygon edge with the box boundary is one intersection click, counted
    per polygon. Class clicks count distinct ground-truth segments visible in the
    box. With ``fresh`` (boolean mask of pixels labeled by this box) only vertices
    and segments on newly labeled pixels are charged.
    """
    row, col, b = box
    gt = check_mask(gt)
    h, w = gt.shape
    if row < 0 or col < 0 or row + b > h or col + b > w:
        raise IndexError(f"box {box} exceeds image of shape {(h, w)}")
    xmin, xmax, ymin, ymax = float(col), float(col + b), float(row), float(row + b)
    c_p = c_i = 0
    for poly in polygons:
        v = np.asarray(poly.vertices, dtype=np.float64)
        inside = (v[:, 0] >= xmin) & (v[:, 0] <= xmax) & (v[:, 1] >= ymin) & (v[:, 1] <= ymax)
        if fresh is not None and inside.any():
            pr = np.clip(np.floor(v[inside, 1]).astype(np.int64), row, row + b - 1)
            pc = np.clip(np.floor(v[inside, 0]).astype(np.int64), col, col + b - 1)
            c_p += int(np.count_nonzero(fresh[pr, pc]))
        else:
            c_p += int(inside.sum())
        for k in range(len(v)):
            c_i += _edge_crossings(v[k], v[(k + 1) % len(v)], xmin, xmax, ymin, ymax)
    if gt_labels is None:
        gt_labels = label_segments(gt, ignore_id)[0]
    window = gt_labels[row:row + b, col:col + b]
    if fresh is not None:
        window = window[fresh[row:row + b, col:col + b]]
    c_c = int(np.unique(window[window >= 0]).size)
    return ClickCounts(c_p=c_p, c_i=c_i, c_b=4, c_c=c_c)


def image_clicks(polygons, gt, ignore_id=None):
    """``(c_p, c_c)`` for annotating a full image: all polygon vertices and one click per segment."""
    c_p = sum(len(p.vertices) for p in polygons)
    c_c = len(label_segments(check_mask(gt), ignore_id)[1])
    return c_p, c_c
