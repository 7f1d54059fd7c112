import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from boxquery._validation import DataError
from boxquery.alloop import (
    Dataset, Experiment, ExperimentConfig, init_experiment, load_checkpoint, mean_rows, run_experiment,
    run_iteration, save_checkpoint, threshold_crossing,
)
from boxquery.clickcost import compute_costs
from boxquery.formats import read_results, write_config


def _config(root, **kw):
    base = dict(pool_dir=str(root / "pool"), val_dir=str(root / "val"), strategy="entropy_plus", b=16, stride=8,
                m_q=4, m_init=2, n_meta=2, iterations=3, repetitions=2, seed=0, adapter="noisy_oracle",
                full_set_miou=1.0, out_dir=str(root / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def datasets(tiny_data):
    return Dataset(tiny_data / "pool"), Dataset(tiny_data / "val")


def _experiment(tiny_data, datasets, **kw):
    return Experiment(_config(tiny_data, **kw), *datasets)


# --- configuration -----------------------------------------------------------------

def test_config_validation(tiny_data):
    with pytest.raises(ValueError, match="valid strategies"):
        _config(tiny_data, strategy="bogus")
    with pytest.raises(ValueError):
        _config(tiny_data, b=0)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"pool_dir": "p", "val_dir": "v", "colour": "red"})
    cfg = ExperimentConfig.from_dict({"pool_dir": "p", "val_dir": "v", "b": "16", "full_set_miou": "0.5",
                                      "strategy": "MetaBox+"})
    assert cfg.b == 16 and cfg.full_set_miou == 0.5 and cfg.strategy == "metabox_plus"


def test_config_file_paths_are_relative_to_the_file(tmp_path):
    (tmp_path / "exp").mkdir()
    write_config(tmp_path / "exp" / "a.cfg", {"pool_dir": "../data/pool", "val_dir": "../data/val", "b": 8})
    cfg = ExperimentConfig.from_file(tmp_path / "exp" / "a.cfg", seed=7)
    assert cfg.seed == 7 and cfg.b == 8
    assert Path(cfg.pool_dir).resolve() == (tmp_path / "data" / "pool").resolve()


# --- initialization ------------------------------------------------------------------

def test_init_split_counts(tiny_data, datasets):
    exp = _experiment(tiny_data, datasets, strategy="metabox_plus")
    state = exp.init_state(0)
    assert len(state.l0_ids) == 2 and len(state.meta_ids) == 2
    assert not set(state.l0_ids) & set(state.meta_ids)
    assert sum(m.all() for m in state.labeled.values()) == 4
    assert set(state.train_ids) == set(state.l0_ids)
    assert not set(state.unlabeled_ids) & (set(state.l0_ids) | set(state.meta_ids))
    led = state.ledger
    assert led.pool_cp == sum(datasets[0].image_clicks(i)[0] for i in datasets[0].ids)
    assert led.init_cp == sum(datasets[0].image_clicks(i)[0] for i in state.l0_ids + state.meta_ids)
    assert len(state.history) == 1 and state.history[0]["iteration"] == 0
    # the oracle sees the whole pool, so two labeled images leave it noisy
    assert state.history[0]["miou"] < 1.0


def test_non_meta_strategies_have_no_meta_set(tiny_data, datasets):
    state = _experiment(tiny_data, datasets, strategy="entropy").init_state(0)
    assert state.meta_ids == []


def test_init_is_seeded(tiny_data, datasets):
    exp = _experiment(tiny_data, datasets)
    assert exp.init_state(3).l0_ids == exp.init_state(3).l0_ids
    assert {tuple(exp.init_state(s).l0_ids) for s in range(6)} != {tuple(exp.init_state(0).l0_ids)}


def test_pool_too_small(tiny_data, datasets):
    with pytest.raises(ValueError, match="smaller"):
        _experiment(tiny_data, datasets, m_init=11, strategy="metabox").init_state(0)


# --- iterations ------------------------------------------------------------------------

@pytest.mark.parametrize("strategy", ["random", "entropy", "entropy_plus", "metabox", "metabox_plus",
                                      "entropy_star", "metabox_star"])
def test_iteration_invariants(tiny_data, datasets, strategy):
    exp = _experiment(tiny_data, datasets, strategy=strategy)
    state = init_experiment(exp.config, experiment=exp)
    cfg = exp.config
    prev = state.ledger.to_dict()
    prev_pixels = sum(int(m.sum()) for m in state.labeled.values())
    meta_before = {i: state.labeled[i].copy() for i in state.meta_ids}
    for _ in range(2):
        run_iteration(state, exp)
        led = state.ledger.to_dict()
        pixels = sum(int(m.sum()) for m in state.labeled.values())
        assert led["labeled_pixels"] == pixels <= led["total_pixels"]
        assert 0 < pixels - prev_pixels <= cfg.m_q * cfg.b ** 2
        assert all(led[k] >= prev[k] for k in led)
        prev, prev_pixels = led, pixels
    assert len(state.history) == state.iteration + 1 == 3
    for i in state.meta_ids:
        np.testing.assert_array_equal(state.labeled[i], meta_before[i])
    row = state.history[-1]
    assert (row["cost_a"], row["cost_b"], row["cost_p"]) == compute_costs(state.ledger)
    assert row["c_b"] == state.ledger.query_cb and row["c_b"] % 4 == 0


def test_exhausted_pool_stops(tiny_data, datasets):
    exp = _experiment(tiny_data, datasets, strategy="random", b=48, stride=48, m_q=20, iterations=5)
    state = exp.run(0)
    assert state.done and all(m.all() for m in state.labeled.values())
    assert state.history[-1]["cost_p"] == pytest.approx(100.0)


def test_full_set_miou_with_perfect_oracle(tiny_data, datasets):
    exp = _experiment(tiny_data, datasets)
    assert exp.full_set_miou(0) == 1.0


# --- determinism and checkpoints ---------------------------------------------------------

def test_runs_are_deterministic(tiny_data, datasets):
    a = _experiment(tiny_data, datasets, strategy="metabox_plus", adapter="pixel_classifier").run(5)
    b = _experiment(tiny_data, datasets, strategy="metabox_plus", adapter="pixel_classifier").run(5)
    assert a.history == b.history
    assert all(np.array_equal(a.labeled[i], b.labeled[i]) for i in a.pool_ids)


def test_checkpoint_resume_is_bit_identical(tiny_data, datasets, tmp_path):
    exp = _experiment(tiny_data, datasets, strategy="random", iterations=4)
    straight = exp.run(1)
    exp2 = _experiment(tiny_data, datasets, strategy="random", iterations=4)
    partial = exp2.run(1, iterations=2, checkpoint=tmp_path / "ck")
    assert partial.iteration == 2
    fresh = _experiment(tiny_data, datasets, strategy="random", iterations=4)
    resumed = fresh.run(1, state=load_checkpoint(tmp_path / "ck", fresh))
    assert json.dumps(resumed.history) == json.dumps(straight.history)
    assert resumed.ledger.to_dict() == straight.ledger.to_dict()


def test_checkpoint_rejects_foreign_pool(tiny_data, datasets, tmp_path):
    exp = _experiment(tiny_data, datasets)
    state = exp.init_state(0)
    save_checkpoint(state, tmp_path / "ck")
    doc = json.loads((tmp_path / "ck" / "state.json").read_text())
    doc["pool_ids"] = doc["pool_ids"][::-1]
    (tmp_path / "ck" / "state.json").write_text(json.dumps(doc))
    with pytest.raises(DataError, match="manifest"):
        load_checkpoint(tmp_path / "ck", exp)
    doc["version"] = 99
    (tmp_path / "ck" / "state.json").write_text(json.dumps(doc))
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "ck", exp)


def test_run_experiment_writes_outputs(tiny_data, datasets, tmp_path):
    cfg = _config(tiny_data, out_dir=str(tmp_path / "out"), full_set_miou=None)
    rows, summary = run_experiment(cfg, Experiment(cfg, *datasets))
    back = read_results(tmp_path / "out" / "results.csv")
    assert len(back) == len(rows) == 2 * 4 + 4
    assert [r["run"] for r in back[-4:]] == ["mean"] * 4
    doc = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert doc["full_set_miou"] == 1.0 and doc["target_miou"] == pytest.approx(0.95)
    assert doc["strategy"] == "EntropyBox+" and len(doc["runs"]) == 2
    assert summary["threshold"] == doc["threshold"]


def test_run_experiment_resume(tiny_data, datasets, tmp_path):
    cfg = _config(tiny_data, out_dir=str(tmp_path / "a"), strategy="random")
    rows, _ = run_experiment(cfg, Experiment(cfg, *datasets), checkpoint_dir=tmp_path / "ck")
    # cut the second run back to iteration 1 by replaying from a partial checkpoint
    shutil.rmtree(tmp_path / "ck" / "run_1")
    exp = Experiment(cfg, *datasets)
    exp.run(1, iterations=1, checkpoint=tmp_path / "ck" / "run_1")
    again, _ = run_experiment(cfg, Experiment(cfg, *datasets), checkpoint_dir=tmp_path / "ck", resume=True)
    assert json.dumps(again) == json.dumps(rows)


# --- aggregation -------------------------------------------------------------------------

def _rows(mious, costs, run=0):
    return [{"iteration": k, "run": run, "strategy": "x", "miou": m, "cost_a": c, "cost_b": c, "cost_p": c,
             "c_p": 1, "c_i": 0, "c_b": 0, "c_c": 1} for k, (m, c) in enumerate(zip(mious, costs))]


def test_threshold_interpolation():
    rows = _rows([0.5, 0.7, 0.9], [1.0, 3.0, 5.0])
    hit = threshold_crossing(rows, 0.8)
    assert hit == {"iteration": 2, "cost_at_iteration": 5.0, "cost_interpolated": pytest.approx(4.0)}
    assert threshold_crossing(rows, 0.4)["cost_interpolated"] == 1.0
    assert threshold_crossing(rows, 0.95) is None


def test_mean_rows_average_runs():
    rows = _rows([0.5, 0.7], [1.0, 3.0], run=0) + _rows([0.7, 0.9], [3.0, 5.0], run=1)
    means = mean_rows(rows)
    assert [m["miou"] for m in means] == pytest.approx([0.6, 0.8])
    assert [m["cost_a"] for m in means] == [2.0, 4.0]
    assert all(m["run"] == "mean" for m in means)
