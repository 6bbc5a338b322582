import numpy as np
import pytest

from semabs.candidates import RegressionTarget
from semabs.geometry import OrientedBox, VoxelGrid
from semabs.model import (
    HeadParams,
    Prediction,
    batch_loss,
    build_feature_volume,
    footprint,
    forward,
    head_forward,
    multi_task_loss,
    pool_many,
    predict_candidates,
    roi_pool_3d,
    sigmoid,
    smooth_l1,
    train,
    write_loss_trace,
)
from semabs.candidates import Candidate

from .oracles import brute_force_roi_pool, loop_forward, reference_loss


def feature_volume(seed=0, n=24):
    rng = np.random.default_rng(seed)
    return build_feature_volume(VoxelGrid(rng.random((n, n, n)) < 0.3))


def random_boxes(rng, n, rotate=True):
    return [OrientedBox(rng.uniform(0.1, 0.9, 3), rng.uniform(0.01, 0.6, 3),
                        rng.uniform(-1, 1, 3) if rotate else np.zeros(3)) for _ in range(n)]


# --- features and pooling ----------------------------------------------------------


def test_feature_channels():
    occ = np.zeros((8, 8, 8), bool)
    occ[4, 4, 4] = True
    fv = build_feature_volume(VoxelGrid(occ))
    assert fv.channels == 7 and fv.resolution == 8
    assert fv.data[4, 4, 4, 0] == 1 and fv.data[3, 3, 3, 1] == pytest.approx(1 / 27)
    assert fv.data[2, 0, 0, 4] == pytest.approx(2.5 / 8)
    with pytest.raises(ValueError):
        build_feature_volume(VoxelGrid(occ), 16)


def test_roi_pool_matches_brute_force():
    fv = feature_volume()
    rng = np.random.default_rng(1)
    for box in random_boxes(rng, 60):
        start, stop = footprint(fv, box)
        assert np.array_equal(roi_pool_3d(fv, box), brute_force_roi_pool(fv.data, start, stop))


def test_pool_many_matches_single_box_pooling():
    fv = feature_volume(2)
    boxes = random_boxes(np.random.default_rng(3), 80)
    many = pool_many(fv, boxes, chunk_cells=5000)
    for row, b in zip(many, boxes):
        assert np.array_equal(row, roi_pool_3d(fv, b).ravel())
    assert pool_many(fv, []).shape == (0, 27 * 7)


def test_thin_box_uses_center_cell():
    fv = feature_volume()
    box = OrientedBox((0.51, 0.5, 0.5), (0.001, 0.2, 0.2))
    start, stop = footprint(fv, box)
    assert stop[0] - start[0] == 1 and start[0] == int(0.51 * 24)
    with pytest.raises(ValueError):
        footprint(fv, OrientedBox((3, 3, 3), (0.1, 0.1, 0.1)))


# --- head --------------------------------------------------------------------------


def small_params(seed, n_in=12, hidden=6):
    rng = np.random.default_rng(seed)
    return HeadParams(rng.normal(0, 0.5, (n_in, hidden)), rng.normal(0, 0.2, hidden),
                      rng.normal(0, 0.5, (hidden, 10)), rng.normal(0, 0.2, 10))


def test_forward_matches_loop_implementation():
    p = small_params(0)
    x = np.random.default_rng(1).normal(size=(5, 12))
    logit, off, _ = forward(p, x)
    ref = loop_forward(p.w1, p.b1, p.w2, p.b2, x)
    assert np.allclose(logit, ref[:, 0], atol=1e-12) and np.allclose(off, ref[:, 1:], atol=1e-12)


def test_batch_loss_matches_reference():
    p = small_params(2)
    rng = np.random.default_rng(3)
    x, y, t = rng.normal(size=(7, 12)), rng.integers(0, 2, 7), rng.normal(0, 2, (7, 9))
    logit, off, _ = forward(p, x)
    assert batch_loss(p, x, y, t, 0.7, grad=False) == pytest.approx(reference_loss(logit, off, y, t, 0.7), rel=1e-12)


def test_gradients_match_central_differences():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        p = small_params(seed)
        x, y, t = rng.normal(size=(6, 12)), rng.integers(0, 2, 6), rng.normal(0, 2, (6, 9))
        lam = rng.uniform(0.1, 2.0)
        _, g = batch_loss(p, x, y, t, lam)
        worst = 0.0
        for arr, garr in zip(p.arrays(), g.arrays()):
            fd = np.empty_like(arr)
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + 1e-6
                up = batch_loss(p, x, y, t, lam, grad=False)
                arr[i] = old - 1e-6
                down = batch_loss(p, x, y, t, lam, grad=False)
                arr[i] = old
                fd[i] = (up - down) / 2e-6
            worst = max(worst, np.max(np.abs(fd - garr) / np.maximum(1e-3, np.abs(fd) + np.abs(garr))))
        assert worst < 1e-4, (seed, worst)


def test_multi_task_loss_examples():
    t = RegressionTarget(np.zeros(3), np.zeros(3), np.zeros(3))
    exact = Prediction(0.8, t)
    assert multi_task_loss(exact, 1, t) == pytest.approx(-np.log(0.8))
    assert multi_task_loss(exact, 0) == pytest.approx(-np.log(0.2))
    off = Prediction(0.8, RegressionTarget(np.array([0.5, 0, 0]), np.array([2.0, 0, 0]), np.zeros(3)))
    assert multi_task_loss(off, 1, t, lam=2.0) == pytest.approx(-np.log(0.8) + 2 * (0.125 + 1.5))
    # negatives carry no regression term
    assert multi_task_loss(off, 0) == pytest.approx(-np.log(0.2))
    with pytest.raises(ValueError):
        multi_task_loss(exact, 1)
    with pytest.raises(ValueError):
        multi_task_loss(exact, 0, t)
    assert np.isfinite(multi_task_loss(Prediction(1.0, t), 0))


def test_smooth_l1_and_sigmoid():
    assert np.allclose(smooth_l1(np.array([-2.0, -0.5, 0.0, 0.5, 3.0])), [1.5, 0.125, 0, 0.125, 2.5])
    assert sigmoid(0.0) == 0.5 and sigmoid(-800.0) >= 0 and sigmoid(800.0) == 1.0


def test_untrained_head_leaves_boxes_unchanged():
    p = HeadParams.init(0)
    pred = head_forward(p, np.ones(27 * 7))
    assert np.allclose(pred.offsets.as_vector(), 0)
    with pytest.raises(ValueError):
        head_forward(p, np.ones(5))


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(5)
    w = rng.normal(size=12)
    batches = []
    for _ in range(4):
        x = rng.normal(size=(32, 12))
        y = (x @ w > 0).astype(int)
        batches.append((x, y, np.outer(y, np.full(9, 0.3))))
    p0 = HeadParams.init(1, n_in=12, hidden=16)
    p1, trace = train(p0, batches, 300, learning_rate=0.05)
    p2, trace2 = train(p0, batches, 300, learning_rate=0.05)
    assert trace[-20:].mean() < 0.5 * trace[:20].mean()
    assert np.array_equal(trace, trace2) and np.array_equal(p1.w1, p2.w1)
    with pytest.raises(ValueError):
        train(p0, [], 3)


def test_checkpoint_and_trace_round_trip(tmp_path):
    p = HeadParams.init(3)
    p.save(tmp_path / "head.npz")
    q = HeadParams.load(tmp_path / "head.npz")
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    write_loss_trace([1.0, 0.5], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["step,loss", "0,1", "1,0.5"]


def test_predict_candidates_scores_in_open_interval():
    fv = feature_volume(4)
    cands = [Candidate(b, "x") for b in random_boxes(np.random.default_rng(6), 5)]
    out = predict_candidates(HeadParams.init(0), fv, cands)
    assert len(out) == 5 and all(0 < c.score < 1 for c in out)
    assert predict_candidates(HeadParams.init(0), fv, []) == []
