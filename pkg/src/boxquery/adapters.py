"""Segmentation model adapters used by the active-learning loop.

Adapters follow the estimator convention: ``fit(samples, labels)`` trains from
scratch on label masks in which unlabeled pixels carry the ignore id, and
``predict_proba(samples)`` returns one (H, W, C) probability map per sample.
"""

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from boxquery._validation import DataError
from boxquery.formats import read_pmap, write_mask


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    gt: np.ndarray


def _image_key(image_id):
    return zlib.crc32(str(image_id).encode())


class NoisyOracle(BaseEstimator):
    """Ground truth corrupted per pixel with probability ``p_max * (1 - l) ** gamma``.

    ``l`` is the labeled fraction seen at fit time. Corrupted pixels get a random
    class. Every pixel puts ``1 - eta`` on its predicted class and spreads ``eta``
    evenly over the others.
    """

    def __init__(self, n_classes, p_max=0.3, gamma=1.0, eta=0.2, ignore_id=255, random_state=0):
        self.n_classes = n_classes
        self.p_max = p_max
        self.gamma = gamma
        self.eta = eta
        self.ignore_id = ignore_id
        self.random_state = random_state

    def fit(self, samples, labels, iteration=0):
        total = sum(int(np.asarray(y).size) for y in labels)
        done = sum(int(np.count_nonzero(np.asarray(y) != self.ignore_id)) for y in labels)
        self.labeled_fraction_ = done / total if total else 0.0
        self.corruption_ = self.p_max * (1.0 - self.labeled_fraction_) ** self.gamma
        self.iteration_ = iteration
        return self

    def predict_proba(self, samples):
        check_is_fitted(self, "corruption_")
        out = []
        c = self.n_classes
        for s in samples:
            rng = np.random.default_rng([self.random_state, self.iteration_, _image_key(s.image_id)])
            pred = np.asarray(s.gt).astype(np.int64)
            pred = np.where(pred >= c, 0, pred)
            flip = rng.random(pred.shape) < self.corruption_
            pred = np.where(flip, rng.integers(0, c, size=pred.shape), pred)
            p = np.full(pred.shape + (c,), self.eta / (c - 1), dtype=np.float32)
            np.put_along_axis(p, pred[..., None], np.float32(1.0 - self.eta), axis=2)
            out.append(p)
        return out

    def predict(self, samples):
        return [np.argmax(p, axis=2).astype(np.uint8) for p in self.predict_proba(samples)]


class PixelClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-centroid pixel classifier with a softmax over squared distances.

    Pixel features are the locally averaged color channels (``smooth`` x
    ``smooth`` window) and the normalized row/column, the latter scaled by
    ``spatial_weight``. The per-pixel posteriors are averaged over a
    ``posterior_smooth`` window, a crude stand-in for the receptive field of a
    convolutional network. Classes without labeled pixels get zero probability.
    """

    def __init__(self, n_classes, temperature=0.01, spatial_weight=0.1, smooth=3, posterior_smooth=5,
                 ignore_id=255):
        self.n_classes = n_classes
        self.temperature = temperature
        self.spatial_weight = spatial_weight
        self.smooth = smooth
        self.posterior_smooth = posterior_smooth
        self.ignore_id = ignore_id

    def _features(self, image):
        img = np.asarray(image, dtype=np.float32) / 255.0
        if self.smooth > 1:
            img = ndimage.uniform_filter(img, size=(self.smooth, self.smooth, 1), mode="nearest")
        h, w = img.shape[:2]
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
        pos = np.stack([(rows + 0.5) / h, (cols + 0.5) / w], axis=2) * self.spatial_weight
        return np.concatenate([img, pos], axis=2)

    def fit(self, samples, labels, iteration=0):
        n_feat = 5
        sums = np.zeros((self.n_classes, n_feat))
        counts = np.zeros(self.n_classes, dtype=np.int64)
        for s, y in zip(samples, labels):
            y = np.asarray(y)
            keep = (y != self.ignore_id) & (y < self.n_classes)
            if not keep.any():
                continue
            f = self._features(s.image)[keep].astype(np.float64)
            cls = y[keep].astype(np.int64)
            counts += np.bincount(cls, minlength=self.n_classes)
            for k in range(n_feat):
                sums[:, k] += np.bincount(cls, weights=f[:, k], minlength=self.n_classes)
        self.class_counts_ = counts
        self.centroids_ = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], np.nan)
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, samples):
        check_is_fitted(self, "centroids_")
        known = self.class_counts_ > 0
        out = []
        for s in samples:
            f = self._features(s.image).astype(np.float64)
            h, w = f.shape[:2]
            if not known.any():
                out.append(np.full((h, w, self.n_classes), 1.0 / self.n_classes, dtype=np.float32))
                continue
            cen = self.centroids_[known]
            d2 = (f * f).sum(axis=2, keepdims=True) - 2.0 * f @ cen.T + (cen * cen).sum(axis=1)
            logits = -d2 / self.temperature
            logits -= logits.max(axis=2, keepdims=True)
            e = np.exp(logits)
            p = np.zeros((h, w, self.n_classes))
            p[:, :, known] = e / e.sum(axis=2, keepdims=True)
            if self.posterior_smooth > 1:
                k = self.posterior_smooth
                p = ndimage.uniform_filter(p, size=(k, k, 1), mode="nearest")
                p /= p.sum(axis=2, keepdims=True)
            out.append(p.astype(np.float32))
        return out

    def predict(self, samples):
        return [np.argmax(p, axis=2).astype(np.uint8) for p in self.predict_proba(samples)]


class FileAdapter(BaseEstimator):
    """Bridge to an external trainer through the file system.

    ``fit`` writes the current label masks to ``root/iter_NNN/labels/<id>.pgm``;
    ``predict_proba`` reads ``root/iter_NNN/<id>.pmap`` produced by the trainer.
    """

    def __init__(self, root, n_classes, strict=True, ignore_id=255):
        self.root = root
        self.n_classes = n_classes
        self.strict = strict
        self.ignore_id = ignore_id

    def iteration_dir(self, iteration):
        return Path(self.root) / f"iter_{iteration:03d}"

    def fit(self, samples, labels, iteration=0):
        self.iteration_ = iteration
        label_dir = self.iteration_dir(iteration) / "labels"
        label_dir.mkdir(parents=True, exist_ok=True)
        for s, y in zip(samples, labels):
            write_mask(label_dir / f"{s.image_id}.pgm", y, self.n_classes)
        return self

    def predict_proba(self, samples):
        check_is_fitted(self, "iteration_")
        out = []
        for s in samples:
            path = self.iteration_dir(self.iteration_) / f"{s.image_id}.pmap"
            if not path.exists():
                raise DataError(f"missing prediction file {path}")
            p = read_pmap(path, strict=self.strict)
            if p.shape[2] != self.n_classes:
                raise DataError(f"{path}: expected {self.n_classes} classes, got {p.shape[2]}")
            out.append(p)
        return out


ADAPTERS = ("noisy_oracle", "pixel_classifier", "file")


def builtin_adapter(kind, n_classes, ignore_id=255, seed=0, root=None, **params):
    if kind == "noisy_oracle":
        return NoisyOracle(n_classes, ignore_id=ignore_id, random_state=seed, **params)
    if kind == "pixel_classifier":
        return PixelClassifier(n_classes, ignore_id=ignore_id, **params)
    if kind == "file":
        if root is None:
            raise ValueError("the file adapter needs a prediction root directory")
        return FileAdapter(root, n_classes, ignore_id=ignore_id, **params)
    raise ValueError(f"unknown adapter {kind!r}; valid adapters: {', '.join(ADAPTERS)}")
