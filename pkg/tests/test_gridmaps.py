import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxquery.gridmaps import aggregate_boxes, anchor_grid, box_sum, build_sat, entropy_map, mask_labeled
from tests.oracles import naive_box_means, naive_prefix


def _uniform(h, w, c):
    return np.full((h, w, c), 1.0 / c, dtype=np.float32)


@pytest.mark.parametrize("c", [2, 3, 19, 40])
def test_entropy_uniform_is_one(c):
    np.testing.assert_allclose(entropy_map(_uniform(3, 4, c)), 1.0, atol=1e-6)


def test_entropy_one_hot_is_zero():
    p = np.zeros((2, 2, 5), dtype=np.float32)
    p[..., 3] = 1
    assert np.all(entropy_map(p) == 0)


def test_entropy_two_way_split_over_19_classes():
    p = np.zeros((1, 1, 19), dtype=np.float32)
    p[0, 0, :2] = 0.5
    assert entropy_map(p)[0, 0] == pytest.approx(math.log(2) / math.log(19), abs=1e-6)
    assert entropy_map(p)[0, 0] == pytest.approx(0.2354, abs=1e-4)


def test_entropy_rejects_single_class():
    with pytest.raises(ValueError):
        entropy_map(np.ones((2, 2, 1), dtype=np.float32))


def test_entropy_rejects_unnormalized():
    with pytest.raises(ValueError):
        entropy_map(np.full((2, 2, 2), 0.3, dtype=np.float32))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_entropy_class_permutation_invariant(c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=(5, 6)).astype(np.float32)
    perm = rng.permutation(c)
    np.testing.assert_allclose(entropy_map(p), entropy_map(p[..., perm]), atol=1e-6)


def test_mask_labeled_cases():
    m = np.full((4, 4), 0.7, dtype=np.float32)
    none = np.zeros((4, 4), dtype=bool)
    np.testing.assert_array_equal(mask_labeled(m, none), m)
    assert np.all(mask_labeled(m, ~none) == 0)
    checker = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
    out = mask_labeled(m, checker)
    np.testing.assert_array_equal(out, np.where(checker, 0.0, np.float32(0.7)))


def test_mask_labeled_idempotent_and_checks_shape():
    rng = np.random.default_rng(0)
    m = rng.random((5, 7)).astype(np.float32)
    lab = rng.random((5, 7)) < 0.4
    once = mask_labeled(m, lab)
    np.testing.assert_array_equal(mask_labeled(once, lab), once)
    with pytest.raises(ValueError):
        mask_labeled(m, lab[:, :6])


def test_sat_small_cases():
    np.testing.assert_array_equal(build_sat(np.array([[2.5]])), [[0, 0], [0, 2.5]])
    assert not build_sat(np.zeros((3, 4))).any()
    assert build_sat(np.zeros((3, 4))).shape == (4, 5)


def test_sat_matches_naive_prefix():
    m = np.random.default_rng(3).random((8, 8))
    sat = build_sat(m)
    assert sat.dtype == np.float64
    np.testing.assert_allclose(sat, naive_prefix(m), rtol=1e-6)


def test_box_sum_constant_and_zero():
    sat = build_sat(np.full((6, 6), 0.25))
    assert box_sum(sat, (1, 2), 3) == pytest.approx(0.25 * 9)
    z = np.zeros((6, 6))
    z[0, 0] = 5
    assert box_sum(build_sat(z), (2, 2), 4) == 0


def test_box_sum_all_anchors_against_loops():
    m = np.random.default_rng(7).random((12, 12))
    sat = build_sat(m)
    for r in range(10):
        for c in range(10):
            expected = sum(m[i, j] for i in range(r, r + 3) for j in range(c, c + 3))
            assert box_sum(sat, (r, c), 3) == pytest.approx(expected, rel=1e-6)


def test_box_sum_out_of_bounds():
    sat = build_sat(np.ones((4, 4)))
    with pytest.raises(IndexError):
        box_sum(sat, (2, 2), 3)
    with pytest.raises(IndexError):
        box_sum(sat, (-1, 0), 2)


def test_aggregate_constant_map():
    out = aggregate_boxes(np.full((9, 9), 0.3, dtype=np.float32), 4, 1)
    assert out.shape == (6, 6)
    np.testing.assert_allclose(out, 0.3, rtol=1e-6)


def test_aggregate_single_pixel():
    m = np.zeros((5, 5), dtype=np.float32)
    m[2, 2] = 1
    out = aggregate_boxes(m, 2, 1)
    assert sorted(zip(*np.nonzero(out))) == [(1, 1), (1, 2), (2, 1), (2, 2)]
    np.testing.assert_allclose(out[out > 0], 0.25)


def test_aggregate_output_dims_with_stride():
    out = aggregate_boxes(np.zeros((20, 17)), 4, 3)
    assert out.shape == ((20 - 4) // 3 + 1, (17 - 4) // 3 + 1)
    rows, cols = anchor_grid((20, 17), 4, 3)
    assert rows[-1] + 4 <= 20 and cols[-1] + 4 <= 17


@pytest.mark.parametrize("b,stride", [(0, 1), (9, 1), (2, 0)])
def test_aggregate_rejects_bad_arguments(b, stride):
    with pytest.raises(ValueError):
        aggregate_boxes(np.zeros((8, 8)), b, stride)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
def test_aggregate_matches_naive(h, w, b, stride, seed):
    if b > min(h, w):
        b = min(h, w)
    m = np.random.default_rng(seed).random((h, w)).astype(np.float32)
    np.testing.assert_allclose(aggregate_boxes(m, b, stride), naive_box_means(m, b, stride), rtol=1e-6, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 20), st.integers(1, 4), st.integers(0, 2**31))
def test_mean_normalization_preserves_ranking(n, b, seed):
    m = np.random.default_rng(seed).random((n, n))
    means = aggregate_boxes(m, b, 1).ravel()
    sums = np.array([m[r:r + b, c:c + b].sum() for r in range(n - b + 1) for c in range(n - b + 1)])
    # ranks agree up to float noise between near-equal sums
    order = np.argsort(-means, kind="stable")
    assert np.all(np.diff(sums[order]) <= 1e-9 * max(1.0, sums.max()))
