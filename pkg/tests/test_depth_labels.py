import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from bevlab.depth_labels import (
    DepthLabelConfig, DisparityMap, SgmConfig, bin_depth, consistency_filter, disparity_to_depth, idw_infill,
    make_depth_label, stereo_disparity,
)
from bevlab.errors import DimensionMismatch, ValidationError


def texture(h, w, seed=0):
    rng = np.random.default_rng(seed)
    from scipy.ndimage import gaussian_filter
    return np.clip(gaussian_filter(rng.uniform(0, 255, (h, w)), 1.0) * 3 - 255, 0, 255)


def idw_oracle(sparse, r, p, guide=None, sigma=10.0):
    h, w = sparse.shape
    out = sparse.copy()
    for y in range(h):
        for x in range(w):
            if sparse[y, x] > 0:
                continue
            num = den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if (dy or dx) and 0 <= yy < h and 0 <= xx < w and sparse[yy, xx] > 0:
                        wgt = np.hypot(dy, dx) ** -p
                        if guide is not None:
                            wgt *= np.exp(-((guide[yy, xx] - guide[y, x]) ** 2) / (2 * sigma**2))
                        num += wgt * sparse[yy, xx]
                        den += wgt
            if den > 0:
                out[y, x] = num / den
    return out


# -- stereo ---------------------------------------------------------------------


def test_identical_images_give_zero_disparity():
    img = texture(40, 60)
    d = stereo_disparity(img, img, SgmConfig(max_disparity=16))
    assert d.valid.mean() > 0.99
    assert np.all(d.values[d.valid] == 0)


def test_shifted_pattern_recovers_shift():
    left = texture(48, 96, 3)
    right = np.roll(left, -8, axis=1)
    d = stereo_disparity(left, right, SgmConfig(max_disparity=24))
    interior = d.valid[4:-4, 32:-12]
    vals = d.values[4:-4, 32:-12][interior]
    assert interior.mean() > 0.9
    assert np.all(np.abs(vals - 8) <= 0.5)


def test_constant_images_are_rejected():
    flat = np.full((30, 50), 100.0)
    d = stereo_disparity(flat, flat, SgmConfig(max_disparity=16))
    assert (~d.valid).mean() >= 0.9


def test_stereo_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        stereo_disparity(np.zeros((10, 10)), np.zeros((10, 11)))


def test_stereo_jobs_do_not_change_result():
    left = texture(32, 64, 4)
    right = np.roll(left, -5, axis=1)
    a = stereo_disparity(left, right, SgmConfig(max_disparity=12))
    b = stereo_disparity(left, right, SgmConfig(max_disparity=12, jobs=3))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.valid, b.valid)


def test_disparity_to_depth_examples():
    disp = DisparityMap(np.array([[10.0, 20.0, 0.0]]), np.array([[True, True, False]]))
    d = disparity_to_depth(disp, 0.5, 100.0)
    assert d.tolist() == [[5.0, 2.5, 0.0]]


# -- consistency filter -------------------------------------------------------------


def test_consistency_examples():
    out = consistency_filter(np.array([[10.0, 10.0, 10.0]]), np.array([[12.0, 5.0, 0.0]]), 0.30)
    assert out.tolist() == [[10.0, 0.0, 10.0]]


@pytest.mark.parametrize("thr", [0.0, 1.5])
def test_consistency_threshold_range(thr):
    with pytest.raises(ValidationError):
        consistency_filter(np.ones((2, 2)), np.ones((2, 2)), thr)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_consistency_is_a_restriction(seed, thr):
    rng = np.random.default_rng(seed)
    lidar = np.where(rng.random((12, 12)) < 0.5, rng.uniform(0.5, 40, (12, 12)), 0.0)
    stereo = np.where(rng.random((12, 12)) < 0.7, rng.uniform(0.5, 40, (12, 12)), 0.0)
    out = consistency_filter(lidar, stereo, thr)
    kept = out > 0
    assert np.all(lidar[kept] > 0)
    assert np.array_equal(out[kept], lidar[kept])


# -- IDW ----------------------------------------------------------------------------


def test_idw_hand_example():
    sparse = np.zeros((5, 5))
    sparse[2, 3] = 2.0  # distance 1 from the centre
    sparse[0, 2] = 4.0  # distance 2
    out = idw_infill(sparse, window_radius=2, power=2.0)
    assert out[2, 2] == pytest.approx(2.4, abs=1e-12)


def test_idw_fully_valid_unchanged():
    full = np.random.default_rng(0).uniform(1, 5, (8, 9))
    assert np.array_equal(idw_infill(full, 3, 2.0), full)


@pytest.mark.parametrize("guided", [False, True])
def test_idw_matches_loop_oracle(guided):
    rng = np.random.default_rng(11)
    sparse = np.where(rng.random((14, 17)) < 0.2, rng.uniform(1, 10, (14, 17)), 0.0)
    guide = rng.uniform(0, 255, (14, 17)) if guided else None
    got = idw_infill(sparse, 3, 1.5, guide, 20.0)
    np.testing.assert_allclose(got, idw_oracle(sparse, 3, 1.5, guide, 20.0), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_idw_is_windowed_convex_combination(seed, r):
    rng = np.random.default_rng(seed)
    sparse = np.where(rng.random((10, 10)) < 0.25, rng.uniform(1, 10, (10, 10)), 0.0)
    out = idw_infill(sparse, r, 2.0)
    pad = np.pad(sparse, r)
    for y, x in zip(*np.nonzero((sparse == 0) & (out > 0))):
        win = pad[y : y + 2 * r + 1, x : x + 2 * r + 1]
        vals = win[win > 0]
        assert vals.min() - 1e-9 <= out[y, x] <= vals.max() + 1e-9
    # no valid neighbour -> stays invalid
    pos = np.pad(sparse > 0, r)
    for y, x in zip(*np.nonzero(out == 0)):
        assert not pos[y : y + 2 * r + 1, x : x + 2 * r + 1].any()


def test_idw_plane_thirty_percent():
    h, w = 96, 128
    yy, xx = np.mgrid[0:h, 0:w]
    plane = 4.0 + 0.02 * xx + 0.05 * yy
    rng = np.random.default_rng(2)
    sparse = np.where(rng.random((h, w)) < 0.30, plane, 0.0)
    out = idw_infill(sparse, 4, 2.0)
    filled = (sparse == 0) & (out > 0)
    assert (out > 0).mean() >= 0.90
    assert np.abs(out[filled] - plane[filled]).mean() < 0.06


# -- binning --------------------------------------------------------------------


def test_bin_examples():
    b = bin_depth(np.array([0.0, 0.5, 25.85, 51.2, 80.0]), 128, 0.5, 51.2)
    assert b.tolist() == [0, 1, 64, 127, 127]


def test_bin_validation():
    with pytest.raises(ValidationError):
        bin_depth(np.ones(3), 1)
    with pytest.raises(ValidationError):
        bin_depth(np.ones(3), 8, 5.0, 5.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=40))
def test_bin_monotone_and_bounded(ds):
    d = np.sort(np.array(ds))
    b = bin_depth(d, 128, 0.5, 51.2)
    assert np.all(np.diff(b) >= 0)
    assert b.min() >= 1 and b.max() <= 127


# -- full label pipeline on the synthetic oracle ---------------------------------------


def test_make_depth_label_static_scene(static_sequence):
    scene, frames, target = static_sequence
    lab = make_depth_label([f.scan for f in frames], [f.lidar_pose for f in frames], target.camera,
                           stereo_depth=target.depth)
    valid = (lab.depth > 0) & (target.depth > 0)
    close = np.abs(lab.depth - target.depth)[valid] < 0.06
    assert close.mean() >= 0.99
    assert lab.density_after >= lab.density_before


def test_make_depth_label_removes_streaks(moving_box_sequence):
    frames, target = moving_box_sequence
    lab = make_depth_label([f.scan for f in frames], [f.lidar_pose for f in frames], target.camera,
                           (target.left, target.right), 0.2)
    acc, stereo = lab.accumulated, lab.stereo
    with np.errstate(divide="ignore", invalid="ignore"):
        streak = (acc > 0) & (stereo > 0) & (np.abs(acc - stereo) / stereo > 0.30)
    assert streak.sum() > 0
    assert np.all(lab.filtered[streak] == 0)


def test_make_depth_label_needs_scans():
    from bevlab.geometry import CameraModel
    with pytest.raises(ValidationError):
        make_depth_label([], [], CameraModel(10, 10, 5, 5, 10, 10), stereo_depth=np.zeros((10, 10)))


def test_config_defaults():
    cfg = DepthLabelConfig()
    assert (cfg.rel_threshold, cfg.idw_radius, cfg.idw_power) == (0.30, 4, 2.0)
