import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from scipy.optimize import linear_sum_assignment

from bevlab.errors import DimensionMismatch, EmptyRegion, RankDeficientWarning, ValidationError
from bevlab.evaluation import (
    OTHER, build_foundation_bev, hungarian, iou, kmeans, mae, pca_fit, pca_transform, unsup_ssc_eval,
)
from bevlab.geometry import CameraModel, Pose
from bevlab.grid import OBSERVED, OCCLUDED, OUTSIDE, GridConfig

from oracles import min_assignment_cost


# -- IoU / MAE ----------------------------------------------------------------------


def test_iou_half_coverage():
    gt = np.array([[1, 1, 1, 1], [2, 2, 2, 2]])
    pred = np.array([[1, 1, 2, 2], [2, 2, 2, 2]])
    rep = iou(pred, gt)
    assert rep.per_class[1] == 0.5
    assert rep.per_class[2] == pytest.approx(4 / 6)
    assert rep.miou == pytest.approx((0.5 + 4 / 6) / 2)


def test_iou_identical_is_one():
    gt = np.random.default_rng(0).integers(1, 5, (10, 10))
    assert iou(gt, gt).miou == 1.0


def test_iou_regions():
    gt = np.array([[1, 1], [2, 2]])
    pred = np.array([[1, 2], [2, 2]])
    part = np.array([[OBSERVED, OCCLUDED], [OBSERVED, OUTSIDE]])
    assert iou(pred, gt, "unoccluded", part).miou == 1.0
    assert iou(pred, gt, "occluded", part).per_class == {1: 0.0}
    with pytest.raises(EmptyRegion):
        iou(pred, np.zeros((2, 2), int))
    with pytest.raises(ValidationError):
        iou(pred, gt, "sideways", part)


def test_iou_predicting_zero_is_a_miss():
    rep = iou(np.array([0, 1]), np.array([1, 1]))
    assert rep.per_class[1] == 0.5


def test_mae_example():
    assert mae(np.array([1.02, 0.04, 9.0]), np.array([1.0, 0.0, 0.0]), valid=np.array([1, 1, 0])) == \
        pytest.approx(0.03)
    with pytest.raises(DimensionMismatch):
        mae(np.zeros(2), np.zeros(3))


# -- PCA ----------------------------------------------------------------------------


def test_pca_matches_svd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 6)) @ rng.normal(size=(6, 6))
    model = pca_fit(x, 3)
    _, s, vt = np.linalg.svd(x - x.mean(0), full_matrices=False)
    np.testing.assert_allclose(model.eigenvalues, s[:3] ** 2 / 499, rtol=1e-9)
    for k in range(3):
        assert abs(abs(model.components[k] @ vt[k]) - 1) < 1e-9
    y = pca_transform(model, x)
    np.testing.assert_allclose(np.cov(y.T), np.diag(model.eigenvalues), atol=1e-8)


def test_pca_isotropic_fraction():
    x = np.random.default_rng(2).normal(size=(20000, 10))
    assert pca_fit(x, 4).explained_fraction == pytest.approx(0.4, abs=0.03)


def test_pca_rank_deficient_warns():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 2)) @ rng.normal(size=(2, 5))
    with pytest.warns(RankDeficientWarning):
        model = pca_fit(x, 4)
    assert len(model.components) == 2


def test_pca_validation():
    with pytest.raises(ValidationError):
        pca_fit(np.zeros((3, 5)), 4)


# -- k-means ------------------------------------------------------------------------


def test_kmeans_two_blobs():
    rng = np.random.default_rng(4)
    a = rng.normal(0.0, 0.1, (200, 2))
    b = rng.normal(5.0, 0.1, (200, 2))
    model, assign = kmeans(np.vstack([a, b]), 2, seed=0)
    cents = model.centroids[np.argsort(model.centroids[:, 0])]
    assert np.all(np.abs(cents[0] - a.mean(0)) < 3 * 0.1 / np.sqrt(200))
    assert np.all(np.abs(cents[1] - b.mean(0)) < 3 * 0.1 / np.sqrt(200))
    assert len(set(assign[:200])) == 1 and len(set(assign[200:])) == 1


def test_kmeans_seeded_reproducible():
    x = np.random.default_rng(5).normal(size=(300, 3))
    a, la = kmeans(x, 4, seed=9)
    b, lb = kmeans(x, 4, seed=9)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(la, lb)


def test_kmeans_validation():
    with pytest.raises(ValidationError):
        kmeans(np.zeros((3, 2)), 4, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_objective_monotone(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(120, 3)) + rng.integers(0, 3, (120, 1))
    model, assign = kmeans(x, k, seed)
    h = model.objective_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert len(np.unique(assign)) <= k
    # final assignment is nearest-centroid
    d = ((x[:, None] - model.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(assign, d.argmin(1))


def test_kmeans_restarts_keep_best():
    rng = np.random.default_rng(10)
    # one dominant blob and three small ones: single starts often split the big blob
    sizes = [3000, 60, 60, 60]
    centers = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * 1.2
    x = np.concatenate([c + rng.normal(0, 0.12, (n, 3)) for c, n in zip(centers, sizes)])
    single, _ = kmeans(x, 4, 0)
    multi, _ = kmeans(x, 4, 0, n_init=5)
    # the first restart replays the single run, so restarts can only improve on it
    assert multi.objective_history[-1] <= single.objective_history[-1]
    # the restarts draw from one stream, so the result is reproducible
    again, _ = kmeans(x, 4, 0, n_init=5)
    assert np.array_equal(multi.centroids, again.centroids)
    with pytest.raises(ValidationError):
        kmeans(x, 4, 0, n_init=0)


def test_kmeans_duplicate_points():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 10, axis=0)
    model, assign = kmeans(x, 3, seed=0)
    assert model.objective_history[-1] == 0.0


# -- Hungarian ----------------------------------------------------------------------


def test_hungarian_examples():
    pairs, total = hungarian(np.array([[1, 2], [2, 1]]))
    assert pairs == [(0, 0), (1, 1)] and total == 2
    pairs, total = hungarian(np.array([[1, 2, 3], [2, 4, 6], [3, 6, 9]]))
    assert pairs == [(0, 2), (1, 1), (2, 0)] and total == 10


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((0, 3))) == ([], 0.0)
    with pytest.raises(ValidationError):
        hungarian(np.array([[np.inf]]))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_hungarian_optimal(seed, n, m):
    rng = np.random.default_rng(seed)
    cost = rng.integers(-5, 10, (n, m)).astype(float) if seed % 2 else rng.normal(size=(n, m))
    pairs, total = hungarian(cost)
    assert len(pairs) == min(n, m)
    assert len({r for r, _ in pairs}) == len(pairs) == len({c for _, c in pairs})
    assert total == pytest.approx(min_assignment_cost(cost), abs=1e-9)
    r, c = linear_sum_assignment(cost)
    assert total == pytest.approx(cost[r, c].sum(), abs=1e-9)


# -- unsupervised protocol ------------------------------------------------------------


def blob_features(rng, labels, dim=8, sep=10.0, sigma=1.0):
    centers = rng.normal(size=(labels.max() + 1, dim))
    centers *= sep / np.linalg.norm(centers[:, None] - centers[None], axis=-1)[np.triu_indices(len(centers), 1)].min()
    return centers[labels] + rng.normal(0, sigma, (len(labels), dim))


def test_unsup_one_hot_is_perfect():
    rng = np.random.default_rng(6)
    lv, lt = rng.integers(1, 5, 400), rng.integers(1, 5, 400)
    rep = unsup_ssc_eval(np.eye(5)[lv], lv, np.eye(5)[lt], lt, k=4, seed=0)
    assert rep.iou.miou == 1.0
    assert sorted(rep.mapping.values()) == [1, 2, 3, 4]


def test_unsup_separated_blobs():
    rng = np.random.default_rng(7)
    labels = rng.integers(1, 5, 2000)
    feats = blob_features(rng, labels, sep=12.0)
    rep = unsup_ssc_eval(feats[:1000], labels[:1000], feats[1000:], labels[1000:], k=4, seed=1, pca_dim=4)
    assert rep.iou.miou >= 0.95
    assert rep.pca is not None


def test_unsup_extra_clusters_map_to_other():
    rng = np.random.default_rng(8)
    lv, lt = rng.integers(1, 3, 300), rng.integers(1, 3, 300)
    rep = unsup_ssc_eval(np.eye(3)[lv] + rng.normal(0, 0.3, (300, 3)), lv, np.eye(3)[lt], lt, k=4, seed=0)
    assert list(rep.mapping.values()).count(OTHER) == 2


def test_unsup_random_features_near_chance():
    rng = np.random.default_rng(9)
    scores = []
    for seed in range(3):
        lv, lt = rng.integers(1, 5, 400), rng.integers(1, 5, 400)
        rep = unsup_ssc_eval(rng.normal(size=(400, 6)), lv, rng.normal(size=(400, 6)), lt, k=4, seed=seed)
        scores.append(rep.iou.miou)
    assert np.mean(scores) < 0.3


def test_unsup_k_too_small():
    lab = np.array([1, 2, 3, 1, 2, 3])
    with pytest.raises(ValidationError):
        unsup_ssc_eval(np.eye(4)[lab], lab, np.eye(4)[lab], lab, k=2, seed=0)


# -- foundation BEV -------------------------------------------------------------------


def test_foundation_bev_max_pool():
    R = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    cam = CameraModel(20.0, 20.0, 1.0, 0.5, 2, 1, Pose.from_matrix(R, -R @ np.array([0.0, 0.0, 10.0])))
    grid = GridConfig(4, 4, 10.0, (25.0, 25.0))
    feats = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    depth = np.full((1, 2), 10.0)
    out = build_foundation_bev(feats, depth, cam, grid)
    assert out.mask.sum() == 1
    assert out.data[out.mask][0].tolist() == [1.0, 1.0]
