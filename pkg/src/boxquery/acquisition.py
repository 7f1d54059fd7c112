"""Box query strategies: priority construction and greedy non-overlapping selection."""

from dataclasses import dataclass

import numpy as np

from boxquery.clickcost import DEFAULT_EPSILON, click_map, vertex_map
from boxquery.gridmaps import aggregate_boxes, anchor_grid, entropy_map, mask_labeled
from boxquery.metaseg import Segmentation, quality_maps

# canonical kind -> display name
STRATEGIES = {
    "random": "RandomBox",
    "entropy": "EntropyBox",
    "entropy_plus": "EntropyBox+",
    "metabox": "MetaBox",
    "metabox_plus": "MetaBox+",
    "entropy_star": "EntropyBox+*",
    "metabox_star": "MetaBox+*",
}
_ALIASES = {name.lower(): kind for kind, name in STRATEGIES.items()}


def parse_strategy(name):
    """Canonical strategy kind from either its kind or its display name (case-insensitive)."""
    key = str(name).strip()
    if key in STRATEGIES:
        return key
    if key.lower() in _ALIASES:
        return _ALIASES[key.lower()]
    valid = ", ".join(f"{k} ({v})" for k, v in STRATEGIES.items())
    raise ValueError(f"unknown strategy {name!r}; valid strategies: {valid}")


def uses_metaseg(kind):
    return kind.startswith("metabox")


def uses_estimated_clicks(kind):
    return kind.endswith("_plus")


def uses_true_clicks(kind):
    return kind.endswith("_star")


@dataclass(frozen=True, order=True)
class CandidateBox:
    image_id: str
    row: int
    col: int
    b: int
    score: float = 0.0

    def overlaps(self, other):
        return (self.image_id == other.image_id
                and self.row < other.row + other.b and other.row < self.row + self.b
                and self.col < other.col + other.b and other.col < self.col + self.b)


@dataclass
class ImageInputs:
    """Everything the strategies need about one query-eligible image."""

    image_id: str
    seg: Segmentation
    labeled: np.ndarray
    polygons: tuple = ()


def joint_priority(factors):
    """Element-wise product of same-shaped priority maps."""
    factors = [np.asarray(f) for f in factors]
    if not factors:
        raise ValueError("need at least one priority factor")
    out = factors[0].astype(np.float64)
    for f in factors[1:]:
        if f.shape != out.shape:
            raise ValueError(f"priority factors differ in shape: {out.shape} vs {f.shape}")
        out = out * f
    return out.astype(np.float32)


def _cost_factors(kind, inputs, b, stride, epsilon):
    """Dataset-normalized click priority ``1 - clicks / max clicks`` per box."""
    clicks = []
    for item in inputs:
        if uses_true_clicks(kind):
            kappa = vertex_map(item.polygons, item.labeled.shape)
        else:
            kappa = click_map(item.seg.mask, epsilon, segments=item.seg.segments)
        # clicks on already labeled pixels are not paid again
        clicks.append(aggregate_boxes(mask_labeled(kappa.astype(np.float32), item.labeled), b, stride))
    top = max((float(c.max()) for c in clicks if c.size), default=0.0)
    if top <= 0:
        return [np.ones_like(c) for c in clicks]
    return [(1.0 - c / top).astype(np.float32) for c in clicks]


def build_priorities(kind, inputs, b, stride=1, metaseg=None, epsilon=DEFAULT_EPSILON, seed=None):
    """Aggregated joint priority maps (one per image) on the anchor grid.

    Returns ``(scores, eligible)`` lists; ``eligible`` marks boxes that still
    contain unlabeled pixels.
    """
    kind = parse_strategy(kind)
    if uses_metaseg(kind) and metaseg is None:
        raise ValueError(f"strategy {kind} needs a trained MetaSeg model")
    if uses_true_clicks(kind) and any(not item.polygons for item in inputs):
        raise ValueError(f"strategy {kind} needs ground-truth polygons for every image")
    rng = np.random.default_rng(seed)
    if uses_metaseg(kind):
        reg = getattr(metaseg, "regressor_", metaseg)
        quality = quality_maps([item.seg for item in inputs], reg)
    scores, eligible = [], []
    for k, item in enumerate(inputs):
        unlabeled = aggregate_boxes((~item.labeled).astype(np.float32), b, stride)
        eligible.append(unlabeled > 0)
        if kind == "random":
            rows, cols = anchor_grid(item.labeled.shape, b, stride)
            scores.append((rng.uniform(size=(len(rows), len(cols))) * unlabeled).astype(np.float32))
        elif uses_metaseg(kind):
            g1 = (1.0 - quality[k]).astype(np.float32)
            scores.append(aggregate_boxes(mask_labeled(g1, item.labeled), b, stride))
        else:
            scores.append(aggregate_boxes(mask_labeled(entropy_map(item.seg.probs), item.labeled), b, stride))
    if uses_estimated_clicks(kind) or uses_true_clicks(kind):
        costs = _cost_factors(kind, inputs, b, stride, epsilon)
        scores = [joint_priority([s, c]) for s, c in zip(scores, costs)]
    return scores, eligible


def candidates_from_maps(image_ids, scores, eligible, b, stride):
    out = []
    for image_id, s, e in zip(image_ids, scores, eligible):
        rows, cols = np.nonzero(e)
        for i, j in zip(rows.tolist(), cols.tolist()):
            out.append(CandidateBox(image_id, i * stride, j * stride, b, float(s[i, j])))
    return out


def select_query(candidates, m_q):
    """Greedy selection of up to ``m_q`` pairwise non-overlapping boxes.

    Candidates are visited by descending score, ties broken by
    ``(image_id, row, col)``; a box is taken unless it overlaps an already taken
    box of the same image. Equivalent to a max-heap with lazy invalidation.
    """
    if not candidates:
        raise ValueError("no candidate boxes")
    if m_q < 1:
        raise ValueError("m_q must be >= 1")
    order = sorted(candidates, key=lambda c: (-c.score, c.image_id, c.row, c.col))
    taken = {}
    selected = []
    for cand in order:
        mine = taken.setdefault(cand.image_id, [])
        if any(cand.overlaps(other) for other in mine):
            continue
        mine.append(cand)
        selected.append(cand)
        if len(selected) == m_q:
            break
    return selected
