import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semabs.data import TOY_VEHICLE, generate_dataset
from semabs.template import (
    Gmm,
    ap_assign,
    ap_cluster,
    assemble_template,
    cluster_scale_primitives,
    exemplar_objective,
    fit_gmm,
    kmeans,
    learn_templates,
    sample_candidate_positions,
    template_from_dict,
    template_to_dict,
)

from .oracles import (
    best_exemplar_objective,
    median_preference,
    mixture_log_likelihood,
    net_similarity,
    separated_clusters,
)


# --- affinity propagation ----------------------------------------------------


def test_ap_finds_two_obvious_clusters():
    rng = np.random.default_rng(0)
    pts = np.r_[rng.normal(0, 0.1, (6, 3)), rng.normal(5, 0.1, (6, 3))]
    ex = ap_cluster(pts)
    assert len(ex) == 2
    lab = ap_assign(pts, ex)
    assert len(set(lab[:6])) == 1 and len(set(lab[6:])) == 1 and lab[0] != lab[6]


def test_ap_matches_exhaustive_search_small():
    rng = np.random.default_rng(11)
    for _ in range(25):
        pts = separated_clusters(rng)
        ex = ap_cluster(pts)
        best = best_exemplar_objective(pts)
        got = net_similarity(pts, ex, median_preference(pts))
        assert got >= best - 1e-9 * abs(best)


def test_exemplar_objective_agrees_with_reference():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(7, 3))
    for ex in ([0], [1, 4], [0, 2, 6]):
        assert exemplar_objective(pts, ex) == pytest.approx(net_similarity(pts, ex, median_preference(pts)), rel=1e-12)


def test_ap_duplicates_and_single_point():
    assert list(ap_cluster(np.zeros((4, 3)))) == [0]
    assert list(ap_cluster(np.ones((1, 3)))) == [0]
    with pytest.raises(ValueError):
        ap_cluster(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ap_cluster(np.zeros((3, 3)), damping=0.3)


def test_ap_is_deterministic():
    pts = np.random.default_rng(4).normal(size=(20, 3))
    assert np.array_equal(ap_cluster(pts), ap_cluster(pts.copy()))


# --- GMM ---------------------------------------------------------------------


def test_gmm_log_likelihood_matches_scipy():
    rng = np.random.default_rng(1)
    g = Gmm(np.array([0.3, 0.7]), rng.normal(size=(2, 3)), rng.uniform(0.1, 2, (2, 3)))
    x = rng.normal(size=(15, 3))
    assert g.log_likelihood(x) == pytest.approx(mixture_log_likelihood(x, g.weights, g.means, g.variances), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(8, 60))
def test_gmm_em_is_monotone(seed, k, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3)) * rng.uniform(0.01, 1, 3)
    _, trace = fit_gmm(x, k, seed=seed, return_trace=True, tol=-np.inf, max_iter=50)
    assert np.all(np.diff(trace) >= -1e-9)


def test_gmm_recovers_separated_means():
    rng = np.random.default_rng(3)
    truth = np.array([[0.2, 0.2, 0.2], [0.8, 0.2, 0.5], [0.5, 0.8, 0.8]])
    x = np.concatenate([m + rng.normal(0, 0.02, (80, 3)) for m in truth])
    g = fit_gmm(x, 3, seed=0)
    got = g.means[np.argsort(g.means[:, 0] + 10 * g.means[:, 1])]
    want = truth[np.argsort(truth[:, 0] + 10 * truth[:, 1])]
    assert np.allclose(got, want, atol=0.01)
    assert np.allclose(g.weights, 1 / 3, atol=0.01)


def test_gmm_variance_floor_and_errors():
    x = np.tile([0.5, 0.5, 0.5], (10, 1))
    g = fit_gmm(x, 1)
    assert np.all(g.variances >= 1e-6)
    with pytest.raises(ValueError):
        fit_gmm(x, 11)
    with pytest.raises(ValueError):
        fit_gmm(x, 0)


def test_candidate_positions_are_dense_lattice_points():
    g = Gmm(np.array([1.0]), np.array([[0.5, 0.5, 0.5]]), np.full((1, 3), 0.01))
    pos = sample_candidate_positions(g, 20, 0.15)
    assert len(pos) > 0
    # every kept point is within the 0.15 density level set of an isotropic gaussian
    r2 = ((pos - 0.5) ** 2).sum(axis=1)
    assert np.all(r2 <= -2 * 0.01 * np.log(0.15) + 1e-12)
    with pytest.raises(ValueError):
        sample_candidate_positions(g, 5)
    with pytest.raises(ValueError):
        sample_candidate_positions(g, 20, 1.5)


# --- scale primitives ----------------------------------------------------------


def test_kmeans_two_blobs():
    rng = np.random.default_rng(0)
    x = np.r_[rng.normal(0, 0.01, (30, 3)), rng.normal(1, 0.01, (30, 3))]
    cent, assign = kmeans(x, 2)
    assert np.allclose(np.sort(cent[:, 0]), [0, 1], atol=0.01)
    assert len(set(assign[:30])) == 1 and len(set(assign[30:])) == 1


def test_scale_primitives_few_distinct_sizes():
    sizes = [[0.1, 0.2, 0.3]] * 5 + [[0.3, 0.3, 0.3]] * 2
    prims = cluster_scale_primitives(sizes, 20)
    assert len(prims) == 2
    with pytest.raises(ValueError):
        cluster_scale_primitives([], 3)


# --- templates -------------------------------------------------------------------


def test_template_cross_product_and_round_trip():
    t = assemble_template("wheel", [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], [[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [0.3, 0.3, 0.3]],
                          Gmm(np.array([1.0]), np.zeros((1, 3)), np.ones((1, 3))))
    assert t.n_boxes == 6
    centers, sizes = t.box_arrays()
    assert np.array_equal(centers[3], [0.4, 0.5, 0.6]) and np.array_equal(sizes[3], [0.1, 0.1, 0.1])
    back = template_from_dict(template_to_dict(t))
    assert np.array_equal(back.positions, t.positions)
    assert np.array_equal(back.scale_primitives, t.scale_primitives)
    assert np.array_equal(back.gmm.variances, t.gmm.variances)
    with pytest.raises(ValueError):
        assemble_template("x", np.zeros((0, 3)), [[1, 1, 1]])


def test_learned_templates_cover_training_parts():
    shapes = generate_dataset(TOY_VEHICLE, 30, seed=0)
    templates = learn_templates(shapes, grid_n=40)
    assert set(templates) == {p.label for p in TOY_VEHICLE.parts}
    wheel = templates["wheel"]
    # four wheel positions on the toy vehicle
    assert wheel.gmm.n_components >= 4
    # each wheel center lies near some candidate position
    for s in shapes[:5]:
        for label, box in s.parts:
            d = np.linalg.norm(templates[label].positions - box.center, axis=1).min()
            assert d < 0.1
