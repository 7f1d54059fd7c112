"""Segment-wise quality estimation (predicted IoU) by meta regression.

Each predicted segment is described by dispersion, shape and class-probability
features. A least-squares gradient-boosted tree ensemble maps those features to
the segment's IoU with the ground truth; ``1 - predicted IoU`` painted back onto
the segment pixels yields the quality priority map.
"""

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from boxquery._validation import check_prob_map, check_same_shape
from boxquery.gridmaps import entropy_map
from boxquery.segmentation import argmax_mask, label_segments, segment_ious

SCALAR_FEATURES = (
    "mean_entropy", "mean_margin", "S", "S_bd", "S_in", "ratio_bd", "ratio_in", "com_row", "com_col",
)


@dataclass(frozen=True)
class SegmentFeatures:
    mean_entropy: float
    mean_margin: float
    S: int
    S_bd: int
    S_in: int
    ratio_bd: float
    ratio_in: float
    com_row: float
    com_col: float
    mean_probs: tuple

    def to_vector(self):
        return np.array([getattr(self, k) for k in SCALAR_FEATURES] + list(self.mean_probs), dtype=np.float64)


class Segmentation:
    """Argmax mask of a probability map with its segment labeling, computed once."""

    def __init__(self, p, ignore_id=None):
        self.probs = check_prob_map(p)
        self.mask = argmax_mask(self.probs)
        self.labels, self.segments = label_segments(self.mask, ignore_id)


def feature_matrix(p, segments, labels=None):
    """One row per segment; columns follow ``SCALAR_FEATURES`` then per-class mean probabilities."""
    p = check_prob_map(p)
    h, w, n_classes = p.shape
    n = len(segments)
    if n == 0:
        return np.zeros((0, len(SCALAR_FEATURES) + n_classes))
    if labels is None:
        labels = np.full((h, w), -1, dtype=np.int64)
        for k, seg in enumerate(segments):
            labels[seg.coords()] = k
        ids = np.arange(n)
    else:
        ids = np.array([seg.id for seg in segments])
    valid = labels >= 0
    lab = labels[valid]
    n_lab = int(labels.max()) + 1

    def seg_sum(values):
        return np.bincount(lab, weights=values[valid].astype(np.float64), minlength=n_lab)[ids]

    sizes = np.array([seg.size for seg in segments], dtype=np.float64)
    n_bd = np.array([seg.n_boundary for seg in segments], dtype=np.float64)
    top2 = np.sort(p, axis=2)[:, :, -2:]
    margin = top2[:, :, 1] - top2[:, :, 0]
    rows, cols = np.mgrid[0:h, 0:w]
    out = np.empty((n, len(SCALAR_FEATURES) + n_classes))
    out[:, 0] = seg_sum(entropy_map(p)) / sizes
    out[:, 1] = seg_sum(margin) / sizes
    out[:, 2] = sizes
    out[:, 3] = n_bd
    out[:, 4] = sizes - n_bd
    out[:, 5] = sizes / n_bd
    out[:, 6] = (sizes - n_bd) / n_bd
    out[:, 7] = seg_sum(rows + 0.5) / sizes / h
    out[:, 8] = seg_sum(cols + 0.5) / sizes / w
    for k in range(n_classes):
        out[:, len(SCALAR_FEATURES) + k] = seg_sum(p[:, :, k]) / sizes
    return out


def extract_features(p, segments, labels=None):
    """Feature records for ``segments`` (derived from ``argmax_mask(p)``), in input order."""
    mat = feature_matrix(p, segments, labels)
    k = len(SCALAR_FEATURES)
    return [
        SegmentFeatures(*row[:2], int(row[2]), int(row[3]), int(row[4]), *row[5:k], tuple(row[k:]))
        for row in mat
    ]


def compute_targets(segments, gt, ignore_id=None):
    return segment_ious(segments, gt, ignore_id)


# --- gradient boosted regression trees ------------------------------------------

class _Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf."""

    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def add_node(self):
        for arr, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1),
                       (self.value, 0.0)):
            arr.append(v)
        return len(self.feature) - 1

    def freeze(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        return self

    def predict(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, feat[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def to_dict(self):
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(), "leaf_value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        tree = cls()
        tree.feature, tree.threshold = d["feature"], d["threshold"]
        tree.left, tree.right, tree.value = d["left"], d["right"], d["leaf_value"]
        return tree.freeze()


def _best_split(X, r, min_leaf):
    """Exact greedy variance-reduction split; ties go to the lowest feature, then threshold."""
    n, n_features = X.shape
    total = r.sum()
    base = total * total / n
    best = (0.0, -1, 0.0)
    counts = np.arange(1, n)
    for f in range(n_features):
        order = np.argsort(X[:, f], kind="stable")
        xs, rs = X[order, f], r[order]
        left_sum = np.cumsum(rs)[:-1]
        gain = left_sum ** 2 / counts + (total - left_sum) ** 2 / (n - counts) - base
        ok = (xs[:-1] < xs[1:]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            lo, hi = xs[i], xs[i + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (gain[i], f, thr)
    return best


def _grow_tree(X, r, max_depth, min_leaf):
    tree = _Tree()
    stack = [(tree.add_node(), np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        tree.value[node] = float(r[idx].mean())
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            continue
        gain, feat, thr = _best_split(X[idx], r[idx], min_leaf)
        # relative guard against splitting on rounding noise
        if feat < 0 or gain <= 1e-12 * max(1.0, float((r[idx] ** 2).sum())):
            continue
        go_left = X[idx, feat] <= thr
        left, right = tree.add_node(), tree.add_node()
        tree.feature[node], tree.threshold[node] = feat, thr
        tree.left[node], tree.right[node] = left, right
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return tree.freeze()


class GradientBoostedTrees(RegressorMixin, BaseEstimator):
    """Least-squares gradient boosting with exact greedy regression trees.

    Each round fits a depth-limited tree to the current residuals and adds it
    with shrinkage ``learning_rate``. ``predict`` clamps to [0, 1] when ``clip``
    is set, matching IoU targets.

    Attributes
    ----------
    base_ : float
        Mean training target, the initial prediction.
    estimators_ : list
        Fitted trees in boosting order.
    train_loss_ : ndarray
        Training MSE after each round.
    """

    def __init__(self, n_estimators=100, max_depth=4, learning_rate=0.1, min_samples_leaf=2,
                 subsample=1.0, clip=True, random_state=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.subsample = subsample
        self.clip = clip
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        rng = np.random.default_rng(self.random_state)
        n = len(y)
        self.n_features_in_ = X.shape[1]
        self.base_ = float(y.mean())
        self.estimators_ = []
        pred = np.full(n, self.base_)
        losses = []
        for _ in range(self.n_estimators):
            residual = y - pred
            if self.subsample < 1.0:
                rows = np.sort(rng.choice(n, size=max(1, int(round(self.subsample * n))), replace=False))
            else:
                rows = slice(None)
            tree = _grow_tree(X[rows], residual[rows], self.max_depth, self.min_samples_leaf)
            pred = pred + self.learning_rate * tree.predict(X)
            self.estimators_.append(tree)
            losses.append(float(np.mean((y - pred) ** 2)))
        self.train_loss_ = np.asarray(losses)
        return self

    def predict_raw(self, X):
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = np.full(len(X), self.base_)
        for tree in self.estimators_:
            out += self.learning_rate * tree.predict(X)
        return out

    def predict(self, X):
        out = self.predict_raw(X)
        return np.clip(out, 0.0, 1.0) if self.clip else out

    def to_json(self):
        check_is_fitted(self, "estimators_")
        return json.dumps({
            "params": self.get_params(),
            "base": self.base_,
            "n_features": self.n_features_in_,
            "train_loss": self.train_loss_.tolist(),
            "trees": [t.to_dict() for t in self.estimators_],
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        reg = cls(**d["params"])
        reg.base_ = d["base"]
        reg.n_features_in_ = d["n_features"]
        reg.train_loss_ = np.asarray(d["train_loss"])
        reg.estimators_ = [_Tree.from_dict(t) for t in d["trees"]]
        return reg


def gbt_fit(features, targets, n_trees=100, max_depth=4, lr=0.1, seed=None):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training set")
    return GradientBoostedTrees(n_estimators=n_trees, max_depth=max_depth, learning_rate=lr,
                                random_state=seed).fit(X, targets)


def gbt_predict(reg, features):
    X = np.asarray(features, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    return reg.predict(X)


# --- quality priority ---------------------------------------------------------------

def _as_segmentation(p, ignore_id=None):
    return p if isinstance(p, Segmentation) else Segmentation(p, ignore_id)


def quality_maps(prob_maps, reg, ignore_id=None):
    """Heatmaps of predicted segment IoU (each pixel carries its segment's value).

    Features of all maps go through the regressor in one batch.
    """
    segs = [_as_segmentation(p, ignore_id) for p in prob_maps]
    feats = [feature_matrix(s.probs, s.segments, s.labels) for s in segs if s.segments]
    pred = gbt_predict(reg, np.concatenate(feats)) if feats else np.zeros(0)
    out, start = [], 0
    for s in segs:
        q = np.zeros(s.mask.shape, dtype=np.float32)
        if s.segments:
            part = pred[start:start + len(s.segments)]
            start += len(s.segments)
            valid = s.labels >= 0
            q[valid] = part[s.labels[valid]]
        out.append(q)
    return out


def quality_map(p, reg, ignore_id=None):
    return quality_maps([p], reg, ignore_id)[0]


def quality_priority(p, reg, ignore_id=None):
    """Priority ``1 - q``: high where segments are predicted to be of low quality."""
    return (1.0 - quality_map(p, reg, ignore_id)).astype(np.float32)


class MetaSegRegressor(BaseEstimator):
    """Meta regression from segment features to segment IoU.

    ``fit`` takes probability maps with their ground-truth masks (the meta set),
    ``predict`` returns quality heatmaps and ``transform`` the priority maps
    ``1 - q`` for new probability maps. Inputs may also be ``Segmentation``
    objects to reuse an existing labeling.
    """

    def __init__(self, n_estimators=100, max_depth=4, learning_rate=0.1, ignore_id=None, random_state=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.ignore_id = ignore_id
        self.random_state = random_state

    def _dataset(self, prob_maps, gt_masks):
        if len(prob_maps) != len(gt_masks):
            raise ValueError("need one ground-truth mask per probability map")
        feats, targets = [], []
        for p, gt in zip(prob_maps, gt_masks):
            seg = _as_segmentation(p)
            check_same_shape(seg.mask, gt, "prediction and ground truth")
            feats.append(feature_matrix(seg.probs, seg.segments, seg.labels))
            targets.append(segment_ious(seg.segments, gt, self.ignore_id))
        if not feats or sum(len(f) for f in feats) == 0:
            raise ValueError("meta set yields no segments; cannot train the regressor")
        return np.concatenate(feats), np.concatenate(targets)

    def fit(self, prob_maps, gt_masks):
        X, y = self._dataset(prob_maps, gt_masks)
        self.regressor_ = GradientBoostedTrees(
            n_estimators=self.n_estimators, max_depth=self.max_depth, learning_rate=self.learning_rate,
            random_state=self.random_state,
        ).fit(X, y)
        self.n_segments_ = len(y)
        return self

    def predict_segments(self, p):
        """Predicted IoU per segment of one probability map, in segment order."""
        check_is_fitted(self, "regressor_")
        seg = _as_segmentation(p)
        return gbt_predict(self.regressor_, feature_matrix(seg.probs, seg.segments, seg.labels))

    def predict(self, prob_maps):
        check_is_fitted(self, "regressor_")
        return quality_maps(prob_maps, self.regressor_)

    def transform(self, prob_maps):
        check_is_fitted(self, "regressor_")
        return [(1.0 - q).astype(np.float32) for q in quality_maps(prob_maps, self.regressor_)]


def metaseg_cycle(meta_predictions, meta_gt, unlabeled_predictions, ignore_id=None, **params):
    """Train on the meta set's predictions and return ``1 - q`` maps for the unlabeled ones."""
    model = MetaSegRegressor(ignore_id=ignore_id, **params).fit(meta_predictions, meta_gt)
    return model.transform(unlabeled_predictions)
