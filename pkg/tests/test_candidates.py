import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semabs.candidates import (
    IGNORED,
    NEGATIVE,
    POSITIVE,
    PROPER_SIGNED_PERMUTATIONS,
    Candidate,
    OccupancyIndex,
    RegressionTarget,
    ShapeSamples,
    apply_offsets,
    classify_iou,
    label_candidates,
    match_directions,
    place_and_shrink,
    regression_target,
    sample_training_batch,
    shrink_boxes,
    shrink_to_fit,
    uniform_voxel_candidates,
    wrap_angle,
)
from semabs.geometry import OrientedBox, VoxelGrid, boxes_equivalent, euler_from_matrix
from semabs.template import assemble_template

from .oracles import brute_force_shrink


def random_grid(rng, n=16, p=0.15):
    return VoxelGrid(rng.random((n, n, n)) < p)


# --- shrink to fit -------------------------------------------------------------


def test_occupancy_index_counts():
    rng = np.random.default_rng(0)
    g = random_grid(rng)
    idx = OccupancyIndex(g)
    lo = rng.integers(0, 8, (50, 3))
    hi = lo + rng.integers(1, 9, (50, 3))
    want = [g.occupancy[a[0]:b[0], a[1]:b[1], a[2]:b[2]].sum() for a, b in zip(lo, hi)]
    assert np.array_equal(idx.count(lo, hi), want)


def test_shrink_matches_cell_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = random_grid(rng, 12, rng.uniform(0.02, 0.3))
        lo = rng.uniform(-0.1, 0.8, (40, 3))
        hi = lo + rng.uniform(0.05, 0.6, (40, 3))
        keep, new_lo, new_hi = shrink_boxes(g, lo, hi, 3)
        for i in range(len(lo)):
            ref = brute_force_shrink(g.occupancy, lo[i], hi[i], 3)
            assert keep[i] == (ref is not None)
            if ref is not None:
                assert np.allclose(new_lo[i], ref[0], atol=1e-12)
                assert np.allclose(new_hi[i], ref[1], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_shrink_never_grows_and_keeps_all_cells(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 10, 0.2)
    lo = rng.uniform(0, 0.7, (20, 3))
    hi = lo + rng.uniform(0.1, 0.5, (20, 3))
    keep, new_lo, new_hi = shrink_boxes(g, lo, hi, 1)
    idx = OccupancyIndex(g)
    assert np.all(new_lo[keep] >= lo[keep] - 1e-12) and np.all(new_hi[keep] <= hi[keep] + 1e-12)
    s0, e0 = g.cell_range(lo[keep], hi[keep])
    s1, e1 = g.cell_range(new_lo[keep], new_hi[keep])
    assert np.array_equal(idx.count(s0, e0), idx.count(s1, e1))


def test_oriented_shrink_agrees_for_axis_aligned_box():
    rng = np.random.default_rng(2)
    g = random_grid(rng, 16, 0.2)
    box = OrientedBox((0.5, 0.45, 0.55), (0.4, 0.3, 0.5))
    keep, lo, hi = shrink_boxes(g, box.center - box.size / 2, box.center + box.size / 2, 1)
    ref = shrink_to_fit(g, box, 1)
    assert keep[0]
    assert boxes_equivalent(ref, OrientedBox.from_bounds(lo[0], hi[0]), 1e-9)


def test_shrink_drops_sparse_boxes():
    occ = np.zeros((8, 8, 8), bool)
    occ[1, 1, 1] = occ[1, 1, 2] = True
    keep, _, _ = shrink_boxes(VoxelGrid(occ), np.zeros((1, 3)), np.full((1, 3), 0.5), 4)
    assert not keep[0]


def test_place_and_shrink_dedupes():
    occ = np.zeros((8, 8, 8), bool)
    occ[2:4, 2:4, 2:4] = True
    t = assemble_template("part", [[0.375, 0.375, 0.375], [0.38, 0.37, 0.375]], [[0.5, 0.5, 0.5], [0.6, 0.6, 0.6]])
    cands = place_and_shrink(t, VoxelGrid(occ))
    assert len(cands) == 1 and cands[0].source == 0
    assert np.allclose(cands[0].box.size, 0.25)
    assert len(place_and_shrink(t, VoxelGrid(occ), dedupe=False)) == 4


def test_uniform_candidates_cap_and_resolution():
    rng = np.random.default_rng(3)
    g = random_grid(rng, 16, 0.3)
    prims = {"a": [[0.2, 0.2, 0.2]], "b": [[0.1, 0.3, 0.2], [0.3, 0.1, 0.1]]}
    full = uniform_voxel_candidates(g, prims, 8, shrink=False)
    coarse = g.occupancy.reshape(8, 2, 8, 2, 8, 2).any(axis=(1, 3, 5)).sum()
    assert len(full) == 3 * coarse
    capped = uniform_voxel_candidates(g, prims, 8, max_per_label=10, rng=np.random.default_rng(0))
    for lab in prims:
        assert sum(c.label == lab for c in capped) <= 10
    with pytest.raises(ValueError):
        uniform_voxel_candidates(g, prims, 5)


# --- labeling ------------------------------------------------------------------


def test_classify_thresholds_are_strict():
    got = classify_iou([0.0, 0.29, 0.3, 0.4, 0.5, 0.51, 1.0])
    assert list(got) == [NEGATIVE, NEGATIVE, IGNORED, IGNORED, IGNORED, POSITIVE, POSITIVE]


def test_label_candidates_uses_same_label_only():
    gt = [("wheel", OrientedBox((0.3, 0.3, 0.3), (0.2, 0.2, 0.2))), ("door", OrientedBox((0.3, 0.3, 0.3), (0.2, 0.2, 0.2)))]
    cands = [
        Candidate(OrientedBox((0.3, 0.3, 0.3), (0.2, 0.2, 0.2)), "wheel"),
        Candidate(OrientedBox((0.3, 0.3, 0.3), (0.2, 0.2, 0.2)), "seat"),
        Candidate(OrientedBox((0.8, 0.8, 0.8), (0.1, 0.1, 0.1)), "door"),
    ]
    lab = label_candidates(cands, gt)
    assert list(lab.status) == [POSITIVE, NEGATIVE, NEGATIVE]
    assert list(lab.best_gt) == [0, -1, -1]
    assert lab.best_iou[0] == pytest.approx(1.0)


# --- regression targets ----------------------------------------------------------


def test_there_are_24_proper_signed_permutations():
    assert len(PROPER_SIGNED_PERMUTATIONS) == 24
    assert np.allclose(np.linalg.det(PROPER_SIGNED_PERMUTATIONS), 1)
    assert len({p.tobytes() for p in PROPER_SIGNED_PERMUTATIONS}) == 24


def test_round_trip_over_every_axis_relabeling():
    rng = np.random.default_rng(4)
    for _ in range(20):
        cand = OrientedBox(rng.uniform(0.2, 0.8, 3), rng.uniform(0.1, 0.4, 3), rng.uniform(-1, 1, 3))
        gt = OrientedBox(cand.center + rng.normal(0, 0.05, 3), rng.uniform(0.1, 0.4, 3), cand.angles + rng.normal(0, 0.2, 3))
        for p in PROPER_SIGNED_PERMUTATIONS:
            # the same solid described with permuted axes
            alt = OrientedBox(gt.center, np.abs(p).T @ gt.size, euler_from_matrix(gt.rotation @ p))
            back = apply_offsets(cand, regression_target(cand, alt))
            assert boxes_equivalent(back, gt, 1e-9)


def test_matched_target_is_small_for_relabeled_copy():
    box = OrientedBox((0.5, 0.5, 0.5), (0.1, 0.2, 0.3), (0.1, 0.2, 0.3))
    p = PROPER_SIGNED_PERMUTATIONS[7]
    alt = OrientedBox(box.center, np.abs(p).T @ box.size, euler_from_matrix(box.rotation @ p))
    t = regression_target(box, alt)
    assert np.allclose(t.as_vector(), 0, atol=1e-9)
    # canonicalization may relabel the axes of alt again; the match undoes whatever it did
    assert np.allclose(alt.rotation @ match_directions(box.rotation, alt.rotation), box.rotation, atol=1e-9)


def test_target_vector_round_trip_and_wrap():
    v = np.arange(9.0)
    assert np.array_equal(RegressionTarget.from_vector(v).as_vector(), v)
    w = wrap_angle(np.array([np.pi, -np.pi, 3 * np.pi, 0.5, -7.0]))
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.exp(1j * w), np.exp(1j * np.array([np.pi, -np.pi, 3 * np.pi, 0.5, -7.0])))


def test_apply_offsets_keeps_sizes_positive():
    b = apply_offsets(OrientedBox((0, 0, 0), (0.1, 0.1, 0.1)), [0, 0, 0, -1, 0, 0, 0, 0, 0])
    assert np.all(b.size > 0)


# --- batches ---------------------------------------------------------------------


def make_pool(rng, n_shapes=10, n_cands=40, pos_rate=0.4):
    pool = []
    for _ in range(n_shapes):
        labels = rng.choice(np.array(["a", "b", "c"]), n_cands)
        r = rng.random(n_cands)
        pool.append(ShapeSamples(labels, r < pos_rate, r > 1 - pos_rate))
    return pool


def test_batch_composition():
    pool = make_pool(np.random.default_rng(5))
    b = sample_training_batch(pool, 0)
    assert len(b) == 64
    assert len(np.unique(b.shape_index)) == 8
    for s in np.unique(b.shape_index):
        sel = b.shape_index == s
        assert sel.sum() == 8 and b.is_positive[sel].sum() == 4
        assert len(np.unique(b.cand_index[sel])) == 8
        assert np.all(pool[s].positive[b.cand_index[sel & (b.is_positive == 1)]])
        assert np.all(pool[s].negative[b.cand_index[sel & (b.is_positive == 0)]])
    assert b.shortfall == 0


def test_batch_positive_shortfall_is_recorded():
    pool = make_pool(np.random.default_rng(6), pos_rate=0.0)
    for s in pool:
        s.negative[:] = True
    b = sample_training_batch(pool, 1)
    assert len(b) == 64 and b.shortfall == 32 and b.notes


def test_batch_is_deterministic_and_needs_enough_shapes():
    pool = make_pool(np.random.default_rng(7))
    a, b = sample_training_batch(pool, 3), sample_training_batch(pool, 3)
    assert np.array_equal(a.cand_index, b.cand_index) and np.array_equal(a.shape_index, b.shape_index)
    with pytest.raises(ValueError):
        sample_training_batch(pool[:5], 0)
