"""Active-learning driver: pool bookkeeping, the train/score/query/annotate cycle, checkpoints.

One run starts from ``m_init`` fully labeled images (plus ``n_meta`` meta images
for the MetaBox strategies), then alternates between training the adapter on
the current labels and letting the oracle annotate ``m_q`` boxes. Every source
of randomness is derived from ``(seed, iteration, purpose)`` so a run can be
resumed from a checkpoint and continue bit-identically.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import clone

from boxquery._validation import DataError
from boxquery.acquisition import (
    STRATEGIES, ImageInputs, build_priorities, candidates_from_maps, parse_strategy, select_query,
    uses_metaseg,
)
from boxquery.adapters import ADAPTERS, Sample, builtin_adapter
from boxquery.clickcost import DEFAULT_EPSILON, CostLedger, compute_costs, count_true_clicks, image_clicks
from boxquery.formats import (
    RESULTS_HEADER, read_config, read_manifest, read_pgm, read_polygons, read_ppm, write_pgm, write_results,
)
from boxquery.metaseg import MetaSegRegressor, Segmentation
from boxquery.segmentation import ConfusionAccumulator, label_segments

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
THRESHOLD_FRACTION = 0.95

# tags mixed into the seed sequence, one per purpose
_TAG_SPLIT, _TAG_QUERY = 1, 2


# --- configuration --------------------------------------------------------------

@dataclass
class ExperimentConfig:
    pool_dir: str
    val_dir: str
    strategy: str = "metabox_plus"
    b: int = 32
    stride: int = 8
    m_q: int = 32
    m_init: int = 2
    n_meta: int = 3
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 10
    repetitions: int = 3
    seed: int = 0
    adapter: str = "pixel_classifier"
    full_set_miou: float = None
    out_dir: str = "results"
    adapter_root: str = None
    threads: int = 1

    def __post_init__(self):
        self.strategy = parse_strategy(self.strategy)
        if self.adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {self.adapter!r}; valid adapters: {', '.join(ADAPTERS)}")
        for name in ("b", "stride", "m_q", "repetitions", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("m_init", "n_meta", "iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.full_set_miou is not None and not 0 < self.full_set_miou <= 1:
            raise ValueError("full_set_miou must lie in (0, 1]")

    @classmethod
    def from_dict(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            if raw is None or raw == "":
                continue
            kind = types[key]
            try:
                kwargs[key] = int(raw) if kind is int else float(raw) if kind is float else str(raw)
            except ValueError:
                raise ValueError(f"config key {key}: cannot parse {raw!r}") from None
        missing = [k for k in ("pool_dir", "val_dir") if k not in kwargs]
        if missing:
            raise ValueError(f"missing config keys: {', '.join(missing)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides):
        values = read_config(path)
        base = Path(path).parent
        for key in ("pool_dir", "val_dir", "out_dir", "adapter_root"):
            if key in values and not os.path.isabs(values[key]):
                values[key] = os.path.normpath(base / values[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    def to_dict(self):
        return asdict(self)


# --- data -----------------------------------------------------------------------

class Dataset:
    """One split on disk: images, ground-truth masks and polygons."""

    def __init__(self, root):
        self.root = Path(root)
        info_path = self.root / "dataset.json"
        if not (self.root / "manifest.txt").exists():
            raise DataError(f"{self.root}: no manifest.txt")
        if not info_path.exists():
            raise DataError(f"{self.root}: no dataset.json")
        info = json.loads(info_path.read_text())
        self.n_classes = int(info["classes"])
        self.ignore_id = int(info["ignore_id"])
        self.ids = [Path(p).stem for p in read_manifest(self.root / "manifest.txt")]
        if len(set(self.ids)) != len(self.ids):
            raise DataError(f"{self.root}: duplicate image ids in manifest")
        self._paths = dict(zip(self.ids, read_manifest(self.root / "manifest.txt")))
        self.samples = {}
        for image_id in self.ids:
            image = read_ppm(self.root / self._paths[image_id])
            gt = read_pgm(self.root / "masks" / f"{image_id}.pgm")
            if image.shape[:2] != gt.shape:
                raise DataError(f"{self.root}: image and mask of {image_id} differ in size")
            self.samples[image_id] = Sample(image_id, image, gt)
        self.polygons = {image_id: [] for image_id in self.ids}
        poly_path = self.root / "polygons.jsonl"
        if poly_path.exists():
            for poly in read_polygons(poly_path):
                if poly.image_id in self.polygons:
                    self.polygons[poly.image_id].append(poly)
        self._gt_labels = {}

    def __len__(self):
        return len(self.ids)

    def gt_labels(self, image_id):
        if image_id not in self._gt_labels:
            self._gt_labels[image_id] = label_segments(self.samples[image_id].gt, self.ignore_id)[0]
        return self._gt_labels[image_id]

    def image_clicks(self, image_id):
        return image_clicks(self.polygons[image_id], self.samples[image_id].gt, self.ignore_id)


# --- state ------------------------------------------------------------------------

@dataclass
class ALState:
    config: ExperimentConfig
    seed: int
    pool_ids: list
    labeled: dict
    l0_ids: list
    meta_ids: list
    ledger: CostLedger
    iteration: int = 0
    history: list = field(default_factory=list)
    done: bool = False

    @property
    def unlabeled_ids(self):
        """Query-eligible images: neither meta images nor fully labeled."""
        meta = set(self.meta_ids)
        return [i for i in self.pool_ids if i not in meta and not self.labeled[i].all()]

    @property
    def train_ids(self):
        meta = set(self.meta_ids)
        return [i for i in self.pool_ids if i not in meta and self.labeled[i].any()]


class Experiment:
    """Runs one seeded trajectory; holds the datasets and a transient model cache."""

    def __init__(self, config, pool=None, val=None):
        self.config = config
        self.pool = pool if pool is not None else Dataset(config.pool_dir)
        self.val = val if val is not None else Dataset(config.val_dir)
        if self.pool.n_classes != self.val.n_classes:
            raise DataError("pool and validation splits disagree on the number of classes")
        self.n_classes = self.pool.n_classes
        self.ignore_id = self.pool.ignore_id
        self._model = None  # (seed, label state) -> fitted adapter
        self.adapter_params = {}

    # adapter handling ---------------------------------------------------------
    def make_adapter(self, seed, tag=""):
        root = self.config.adapter_root
        if self.config.adapter == "file" and root is None:
            root = str(Path(self.config.out_dir) / "predictions")
        if self.config.adapter == "file" and tag:
            root = str(Path(root) / tag)
        return builtin_adapter(self.config.adapter, self.n_classes, ignore_id=self.ignore_id, seed=seed, root=root,
                               **self.adapter_params)

    def _labels(self, state, image_id):
        gt = self.pool.samples[image_id].gt
        return np.where(state.labeled[image_id], gt, self.ignore_id).astype(gt.dtype)

    def train(self, state):
        """Adapter fitted from scratch on the labels of ``state`` (cached per label state)."""
        key = (state.seed, state.iteration)
        if self._model is not None and self._model[0] == key:
            return self._model[1]
        # every non-meta image is passed; unlabeled ones carry only the ignore id
        meta = set(state.meta_ids)
        ids = [i for i in state.pool_ids if i not in meta]
        model = clone(self.make_adapter(state.seed, f"run_{state.seed}"))
        model.fit([self.pool.samples[i] for i in ids], [self._labels(state, i) for i in ids],
                  iteration=state.iteration)
        self._model = (key, model)
        return model

    def evaluate(self, model):
        acc = ConfusionAccumulator(self.n_classes, self.ignore_id)
        samples = [self.val.samples[i] for i in self.val.ids]
        for s, p in zip(samples, model.predict_proba(samples)):
            acc.update(np.argmax(p, axis=2), s.gt)
        return acc.mean_iou()

    def full_set_miou(self, seed=0):
        """Validation mIoU of the adapter trained on the fully labeled pool."""
        ids = self.pool.ids
        model = self.make_adapter(seed, "full_set")
        model.fit([self.pool.samples[i] for i in ids], [self.pool.samples[i].gt for i in ids], iteration=0)
        return self.evaluate(model)

    def _map(self, fn, items):
        if self.config.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    # lifecycle ------------------------------------------------------------------
    def init_state(self, seed):
        cfg = self.config
        n_meta = cfg.n_meta if uses_metaseg(cfg.strategy) else 0
        if len(self.pool) < cfg.m_init + n_meta:
            raise ValueError(f"pool of {len(self.pool)} images is smaller than m_init + n_meta = {cfg.m_init + n_meta}")
        rng = np.random.default_rng([seed, 0, _TAG_SPLIT])
        perm = rng.permutation(len(self.pool))
        l0 = [self.pool.ids[k] for k in perm[:cfg.m_init]]
        meta = [self.pool.ids[k] for k in perm[cfg.m_init:cfg.m_init + n_meta]]
        pool_cp = pool_cc = total = 0
        for image_id in self.pool.ids:
            c_p, c_c = self.pool.image_clicks(image_id)
            pool_cp += c_p
            pool_cc += c_c
            total += self.pool.samples[image_id].gt.size
        ledger = CostLedger(pool_cp=pool_cp, pool_cc=pool_cc, total_pixels=total)
        labeled = {i: np.zeros(self.pool.samples[i].gt.shape, dtype=bool) for i in self.pool.ids}
        for image_id in l0 + meta:
            c_p, c_c = self.pool.image_clicks(image_id)
            ledger.add_image(c_p, c_c, labeled[image_id].size)
            labeled[image_id][:] = True
        state = ALState(cfg, seed, list(self.pool.ids), labeled, l0, meta, ledger)
        self._record(state, self.evaluate(self.train(state)))
        return state

    def _record(self, state, miou):
        led = state.ledger
        cost_a, cost_b, cost_p = compute_costs(led)
        state.history.append({
            "iteration": state.iteration, "run": state.seed, "strategy": STRATEGIES[self.config.strategy],
            "cost_a": cost_a, "cost_b": cost_b, "cost_p": cost_p, "miou": float(miou),
            "c_p": led.init_cp + led.query_cp, "c_i": led.query_ci, "c_b": led.query_cb,
            "c_c": led.init_cc + led.query_cc,
        })

    def select(self, state, model):
        """Boxes the strategy queries in the next iteration, given the current model."""
        cfg = self.config
        u_ids = state.unlabeled_ids
        if not u_ids:
            return []
        samples = [self.pool.samples[i] for i in u_ids]
        segs = self._map(lambda p: Segmentation(p, self.ignore_id), model.predict_proba(samples))
        metaseg = None
        if uses_metaseg(cfg.strategy):
            meta_samples = [self.pool.samples[i] for i in state.meta_ids]
            meta_segs = [Segmentation(p, self.ignore_id) for p in model.predict_proba(meta_samples)]
            metaseg = MetaSegRegressor(ignore_id=self.ignore_id, random_state=state.seed).fit(
                meta_segs, [s.gt for s in meta_samples])
        inputs = [ImageInputs(i, s, state.labeled[i], tuple(self.pool.polygons[i])) for i, s in zip(u_ids, segs)]
        query_seed = np.random.SeedSequence([state.seed, state.iteration + 1, _TAG_QUERY])
        scores, eligible = build_priorities(cfg.strategy, inputs, cfg.b, cfg.stride, metaseg=metaseg,
                                            epsilon=cfg.epsilon, seed=query_seed)
        candidates = candidates_from_maps(u_ids, scores, eligible, cfg.b, cfg.stride)
        if not candidates:
            return []
        return select_query(candidates, cfg.m_q)

    def annotate(self, state, boxes):
        """Oracle step: copy ground truth into the boxes and charge their clicks."""
        for box in boxes:
            labeled = state.labeled[box.image_id]
            fresh = np.zeros_like(labeled)
            fresh[box.row:box.row + box.b, box.col:box.col + box.b] = True
            fresh &= ~labeled
            n_new = int(fresh.sum())
            if n_new == 0:
                continue
            clicks = count_true_clicks((box.row, box.col, box.b), self.pool.polygons[box.image_id],
                                       self.pool.samples[box.image_id].gt, self.ignore_id, fresh=fresh,
                                       gt_labels=self.pool.gt_labels(box.image_id))
            state.ledger.add_box(clicks, n_new)
            labeled |= fresh

    def step(self, state):
        """One active-learning iteration; returns the boxes queried (empty when U is exhausted)."""
        if state.done:
            return []
        boxes = self.select(state, self.train(state))
        if not boxes:
            state.done = True
            return []
        self.annotate(state, boxes)
        state.iteration += 1
        self._record(state, self.evaluate(self.train(state)))
        log.info("seed %d iteration %d: mIoU %.4f cost_A %.2f%%", state.seed, state.iteration,
                 state.history[-1]["miou"], state.history[-1]["cost_a"])
        return boxes

    def run(self, seed, iterations=None, checkpoint=None, state=None):
        """Full trajectory for one seed, optionally resuming from ``state``."""
        iterations = self.config.iterations if iterations is None else iterations
        if state is None:
            state = self.init_state(seed)
        while state.iteration < iterations and not state.done:
            self.step(state)
            if checkpoint is not None:
                save_checkpoint(state, checkpoint)
        return state


# --- module-level conveniences -------------------------------------------------------

def init_experiment(config, seed=None, experiment=None):
    exp = experiment or Experiment(config)
    return exp.init_state(config.seed if seed is None else seed)


def run_iteration(state, experiment):
    experiment.step(state)
    return state


# --- checkpoints --------------------------------------------------------------------

def save_checkpoint(state, directory):
    """Write ``state.json`` plus one 0/1 PGM per partially or fully labeled image."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    masks = []
    for image_id in state.pool_ids:
        m = state.labeled[image_id]
        if m.any():
            write_pgm(directory / "masks" / f"{image_id}.pgm", m.astype(np.uint8), maxval=255)
            masks.append(image_id)
    doc = {
        "version": CHECKPOINT_VERSION, "config": state.config.to_dict(), "seed": state.seed,
        "iteration": state.iteration, "done": state.done, "pool_ids": state.pool_ids,
        "l0_ids": state.l0_ids, "meta_ids": state.meta_ids, "labeled_masks": masks,
        "ledger": state.ledger.to_dict(), "history": state.history,
    }
    tmp = directory / "state.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    tmp.replace(directory / "state.json")


def load_checkpoint(directory, experiment):
    directory = Path(directory)
    doc = json.loads((directory / "state.json").read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{directory}: unsupported checkpoint version {doc.get('version')}")
    if doc["pool_ids"] != experiment.pool.ids:
        raise DataError(f"{directory}: checkpoint does not match the pool manifest")
    labeled = {i: np.zeros(experiment.pool.samples[i].gt.shape, dtype=bool) for i in doc["pool_ids"]}
    for image_id in doc["labeled_masks"]:
        labeled[image_id] = read_pgm(directory / "masks" / f"{image_id}.pgm") > 0
    return ALState(
        config=experiment.config, seed=doc["seed"], pool_ids=doc["pool_ids"], labeled=labeled,
        l0_ids=doc["l0_ids"], meta_ids=doc["meta_ids"], ledger=CostLedger.from_dict(doc["ledger"]),
        iteration=doc["iteration"], history=[{k: row[k] for k in RESULTS_HEADER} for row in doc["history"]],
        done=doc["done"],
    )


# --- results aggregation ----------------------------------------------------------------

_METRICS = ("cost_a", "cost_b", "cost_p", "miou", "c_p", "c_i", "c_b", "c_c")


def mean_rows(rows):
    """Per-iteration means over runs (runs that stopped early drop out of later means)."""
    by_iter = {}
    for row in rows:
        by_iter.setdefault(row["iteration"], []).append(row)
    out = []
    for it in sorted(by_iter):
        group = by_iter[it]
        mean = {"iteration": it, "run": "mean", "strategy": group[0]["strategy"]}
        for key in _METRICS:
            mean[key] = float(np.mean([r[key] for r in group]))
        out.append(mean)
    return out


def threshold_crossing(rows, target, cost_key="cost_a"):
    """First iteration whose mIoU reaches ``target`` and the interpolated cost there.

    The cost is interpolated linearly between the last point below the target and
    the first one at or above it. Returns ``None`` if the target is never reached.
    """
    rows = sorted(rows, key=lambda r: r["iteration"])
    for k, row in enumerate(rows):
        if row["miou"] >= target:
            cost = row[cost_key]
            if k > 0:
                prev = rows[k - 1]
                span = row["miou"] - prev["miou"]
                frac = (target - prev["miou"]) / span if span > 0 else 1.0
                cost = prev[cost_key] + frac * (row[cost_key] - prev[cost_key])
            return {"iteration": int(row["iteration"]), "cost_at_iteration": float(row[cost_key]),
                    "cost_interpolated": float(cost)}
    return None


def run_experiment(config, experiment=None, write=True, checkpoint_dir=None, resume=False):
    """All repetitions of one configuration; returns ``(rows, summary)``.

    Rows hold every run's per-iteration records followed by the per-iteration
    means. Repetition ``r`` uses seed ``config.seed + r``. With ``checkpoint_dir``
    each run checkpoints into ``run_<seed>/`` after every iteration, and
    ``resume`` picks up from existing checkpoints.
    """
    exp = experiment or Experiment(config)
    full = config.full_set_miou
    if full is None:
        full = exp.full_set_miou(config.seed)
    target = THRESHOLD_FRACTION * full
    rows, runs = [], []
    for r in range(config.repetitions):
        seed = config.seed + r
        ckpt = state = None
        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir) / f"run_{seed}"
            if resume and (ckpt / "state.json").exists():
                state = load_checkpoint(ckpt, exp)
                if state.seed != seed:
                    raise DataError(f"{ckpt}: checkpoint belongs to seed {state.seed}")
        state = exp.run(seed, checkpoint=ckpt, state=state)
        rows.extend(state.history)
        runs.append({"seed": state.seed, "iterations": state.iteration,
                     "threshold": threshold_crossing(state.history, target)})
    means = mean_rows(rows)
    summary = {
        "strategy": STRATEGIES[config.strategy], "full_set_miou": float(full), "target_miou": float(target),
        "threshold": threshold_crossing(means, target),
        "threshold_cost_b": threshold_crossing(means, target, "cost_b"),
        "runs": runs, "config": config.to_dict(),
    }
    rows = rows + means
    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", rows)
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return rows, summary
