import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxquery.clickcost import (
    ClickCounts, CostLedger, Polygon, _segment_vertices, click_map, click_priority, compute_costs,
    count_true_clicks, estimate_box_clicks, image_clicks, rdp, vertex_map,
)
from boxquery.gridmaps import build_sat
from boxquery.segmentation import label_segments, trace_contours
from boxquery.synth import SceneSpec, generate_scene, rasterize
from tests.oracles import reference_rdp

CAR = ((14, 22), (18, 14), (24, 13), (28, 18), (27, 26), (36, 30), (20, 36))


def _car_scene():
    gt = rasterize(CAR, (40, 40)).astype(np.uint8)
    polys = [Polygon("img", 0, ((0, 0), (40, 0), (40, 40), (0, 40))), Polygon("img", 1, CAR)]
    return gt, polys


# --- RDP -----------------------------------------------------------------------

def test_rdp_collinear_keeps_endpoints():
    pts = [(k, 2 * k) for k in range(10)]
    for eps in (0.01, 1.0, 50.0):
        np.testing.assert_array_equal(rdp(pts, eps), [(0, 0), (9, 18)])


def test_rdp_rasterized_rectangle_contour():
    m = np.zeros((24, 34), dtype=np.uint8)
    m[2:22, 2:32] = 1
    seg = [s for s in label_segments(m)[1] if s.cls == 1][0]
    contour = trace_contours(seg)[0][:, ::-1]
    out = rdp(contour, 1.0, closed=True)
    assert {tuple(p) for p in out} == {(2, 2), (31, 2), (31, 21), (2, 21)}


def test_rdp_zigzag_zero_epsilon_keeps_extremes():
    pts = [(k, 5 * (k % 2)) for k in range(9)]
    np.testing.assert_array_equal(rdp(pts, 0.0), pts)


def test_rdp_errors():
    with pytest.raises(ValueError):
        rdp([(0, 0)], 1.0)
    with pytest.raises(ValueError):
        rdp([(0, 0), (1, 1)], -1.0)


def test_rdp_closed_drops_repeated_endpoint():
    square = [(0, 0), (4, 0), (4, 4), (0, 4), (0, 0)]
    assert len(rdp(square, 0.5, closed=True)) == 4


@settings(max_examples=120, deadline=None)
@given(st.lists(st.tuples(st.integers(-30, 30), st.integers(-30, 30)), min_size=2, max_size=25),
       st.floats(0, 6))
def test_rdp_open_matches_recursive_reference(pts, eps):
    out = rdp(pts, eps)
    ref = reference_rdp(pts, eps)
    np.testing.assert_allclose(out, np.array(ref).reshape(-1, 2))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-30, 30), st.integers(-30, 30)), min_size=4, max_size=25, unique=True),
       st.floats(0, 6))
def test_rdp_closed_keeps_subset_in_ring_order(pts, eps):
    out = [tuple(p) for p in rdp(pts, eps, closed=True)]
    idx = [pts.index(p) for p in out]
    assert len(set(idx)) == len(idx) >= 2
    # the kept points appear in cyclic ring order
    k = idx.index(min(idx))
    rotated = idx[k:] + idx[:k]
    assert rotated == sorted(rotated)


# --- estimated clicks --------------------------------------------------------------

def test_full_image_segment_marks_four_corners():
    pr = click_priority(np.zeros((16, 20), dtype=np.uint8))
    assert set(np.unique(pr)) == {0.0, 1.0}
    assert sorted(zip(*np.nonzero(pr == 0))) == [(0, 0), (0, 19), (15, 0), (15, 19)]
    kappa = click_map(np.zeros((16, 20), dtype=np.uint8))
    assert estimate_box_clicks(kappa, (0, 0, 16)) == 2
    assert estimate_box_clicks(np.pad(kappa, ((0, 4), (0, 0))), (0, 0, 20)) == 4


def test_all_ignore_mask_gives_all_ones():
    pr = click_priority(np.full((6, 6), 255, dtype=np.uint8), ignore_id=255)
    assert np.all(pr == 1)


def test_two_separate_rectangles_give_eight_clicks():
    m = np.full((20, 30), 255, dtype=np.uint8)
    m[2:9, 2:12] = 1
    m[11:18, 16:27] = 2
    assert click_map(m, ignore_id=255).sum() == 8


def test_shared_corners_are_clicked_once():
    m = np.zeros((10, 20), dtype=np.uint8)
    m[:, 10:] = 1
    # two halves: 4 outer corners plus the 2 ends of the shared edge
    assert click_map(m).sum() == 6


def test_estimate_box_clicks_counts():
    kappa = np.zeros((10, 10), dtype=np.uint8)
    kappa[[1, 2, 3], [1, 5, 2]] = 1
    kappa[9, 9] = 1
    assert estimate_box_clicks(kappa, (5, 5, 3)) == 0
    assert estimate_box_clicks(kappa, (0, 0, 6)) == 3
    assert estimate_box_clicks(kappa, (0, 0, 6), sat=build_sat(kappa.astype(float))) == 3
    with pytest.raises(IndexError):
        estimate_box_clicks(kappa, (6, 6, 5))


def test_click_map_small_segment_cache_is_transparent():
    rng = np.random.default_rng(4)
    m = (rng.random((30, 30)) < 0.15).astype(np.uint8)
    first = click_map(m)
    np.testing.assert_array_equal(click_map(m), first)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_click_priority_binary(seed, k):
    m = np.random.default_rng(seed).integers(0, k + 1, size=(12, 15)).astype(np.uint8)
    pr = click_priority(m)
    assert pr.shape == m.shape and set(np.unique(pr)) <= {0.0, 1.0}
    # marks are raw contour vertices, and every raw vertex has a mark within one pixel
    raw = np.concatenate([_segment_vertices(s, 1.5) for s in label_segments(m)[1]])
    marked = np.argwhere(pr == 0)
    assert {tuple(p) for p in marked} <= {tuple(p) for p in raw}
    cheb = np.abs(raw[:, None, :] - marked[None, :, :]).max(axis=2)
    assert np.all(cheb.min(axis=1) <= 1)


@pytest.mark.parametrize("eps", [1.0, 1.5, 2.0])
def test_estimated_clicks_close_to_true_vertices(eps):
    spec = SceneSpec(seed=3)
    est = true = 0
    for i in range(25):
        _, mask, polys = generate_scene(spec, i)
        est += int(click_map(mask, eps).sum())
        true += sum(len(p.vertices) for p in polys)
    assert abs(est - true) <= 0.2 * true


def test_vertex_map_floor_and_clip():
    poly = Polygon("a", 1, ((0.5, 0.5), (4.0, 0.2), (3.9, 3.9)))
    kappa = vertex_map([poly], (4, 4))
    assert sorted(zip(*np.nonzero(kappa))) == [(0, 0), (0, 3), (3, 3)]


# --- true clicks ---------------------------------------------------------------

def test_car_box_click_counts():
    gt, polys = _car_scene()
    counts = count_true_clicks((10, 10, 20), polys, gt)
    assert counts == ClickCounts(c_p=5, c_i=2, c_b=4, c_c=2)


def test_box_inside_one_segment():
    gt, polys = _car_scene()
    assert count_true_clicks((1, 1, 6), polys, gt) == ClickCounts(0, 0, 4, 1)


def test_triangle_inside_box():
    tri = ((12, 12), (20, 12), (14, 19))
    gt = rasterize(tri, (32, 32)).astype(np.uint8)
    counts = count_true_clicks((8, 8, 16), [Polygon("t", 1, tri)], gt)
    assert (counts.c_p, counts.c_i, counts.c_c) == (3, 0, 2)


def test_boundary_vertex_counts_inside_and_corner_crossing_once():
    poly = Polygon("p", 1, ((10, 5), (15, 10), (10, 15)))
    gt = np.zeros((20, 20), dtype=np.uint8)
    # (10, 5) lies on the top edge of the box x, y in [5, 15]
    assert count_true_clicks((5, 5, 10), [poly], gt).c_p == 3
    # an edge entering and leaving through two box corners: one click per corner
    diag = Polygon("d", 1, ((0, 0), (20, 20), (20, 0)))
    assert count_true_clicks((5, 5, 5), [diag], gt).c_i == 2
    # grazing a corner without entering is not a crossing
    assert count_true_clicks((5, 0, 5), [diag], gt).c_i == 0


def test_fresh_mask_charges_only_new_pixels():
    gt, polys = _car_scene()
    fresh = np.zeros((40, 40), dtype=bool)
    fresh[10:30, 10:20] = True
    counts = count_true_clicks((10, 10, 20), polys, gt, fresh=fresh)
    # vertices (14,22) and (18,14) sit on fresh pixels
    assert counts.c_p == 2 and counts.c_b == 4
    none = count_true_clicks((10, 10, 20), polys, gt, fresh=np.zeros((40, 40), dtype=bool))
    assert none.c_p == 0 and none.c_c == 0


def test_count_true_clicks_rejects_outside_box():
    gt, polys = _car_scene()
    with pytest.raises(IndexError):
        count_true_clicks((30, 30, 20), polys, gt)


def test_image_clicks_counts_vertices_and_segments():
    gt, polys = _car_scene()
    assert image_clicks(polys, gt) == (4 + 7, 2)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60)), min_size=3, max_size=8),
       st.integers(0, 40), st.integers(0, 40), st.integers(1, 20))
def test_crossing_parity(verts, row, col, b):
    xmin, xmax, ymin, ymax = col, col + b, row, row + b
    # half-integer offset keeps every vertex strictly off the box boundary
    verts = tuple((x + 0.5, y + 0.5) for x, y in verts)
    c = count_true_clicks((row, col, b), [Polygon("p", 1, verts)], np.zeros((61, 61), dtype=np.uint8))
    assert c.c_i % 2 == 0
    assert c.c_p == sum(xmin <= x <= xmax and ymin <= y <= ymax for x, y in verts)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10))
def test_true_clicks_monotone_in_box_size(seed, b):
    rng = np.random.default_rng(seed)
    spec = SceneSpec(height=48, width=48, radius_range=(6.0, 14.0), seed=int(rng.integers(1 << 16)))
    _, gt, polys = generate_scene(spec, 0)
    r, c = rng.integers(0, 48 - 2 * b + 1, size=2)
    small = count_true_clicks((r, c, b), polys, gt)
    large = count_true_clicks((r, c, 2 * b), polys, gt)
    assert large.c_p >= small.c_p and large.c_c >= small.c_c


# --- cost metrics -------------------------------------------------------------------

def _ledger(**kw):
    base = dict(pool_cp=100, pool_cc=20, total_pixels=1000)
    base.update(kw)
    return CostLedger(**base)


def test_hand_ledger():
    led = _ledger(init_cp=10, init_cc=4, query_cp=20, query_ci=6, query_cb=12, query_cc=5)
    a, b, _ = compute_costs(led)
    assert abs(a - 37.5) < 1e-9 and abs(b - 48.0) < 1e-9


def test_initial_set_only_reduction():
    led = _ledger(init_cp=13, init_cc=3, labeled_pixels=250)
    a, b, p = compute_costs(led)
    assert a == pytest.approx(100 * 16 / 120) and b == pytest.approx(13.0) and p == pytest.approx(25.0)


def test_full_labeling_is_hundred_percent():
    led = _ledger(init_cp=100, init_cc=20, labeled_pixels=1000)
    a, _, p = compute_costs(led)
    assert a == pytest.approx(100.0) and p == pytest.approx(100.0)


def test_costs_may_exceed_hundred():
    led = _ledger(query_cp=100, query_ci=40, query_cc=30, query_cb=400)
    a, b, _ = compute_costs(led)
    assert a > 100 and b > 100


def test_zero_pool_rejected():
    with pytest.raises(ValueError):
        compute_costs(CostLedger(pool_cp=0, pool_cc=0, total_pixels=10))


def test_ledger_accumulates_and_round_trips():
    led = _ledger()
    led.add_image(5, 2, 100)
    led.add_box(ClickCounts(3, 2, 4, 1), 40)
    led.add_box(ClickCounts(1, 0, 4, 1), 10)
    assert (led.query_cp, led.query_ci, led.query_cb, led.query_cc, led.labeled_pixels) == (4, 2, 8, 2, 150)
    assert CostLedger.from_dict(led.to_dict()).to_dict() == led.to_dict()
