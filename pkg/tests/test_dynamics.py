import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from scipy.spatial import cKDTree

from bevlab.dynamics import VoxelMap, build_static_map, classify_dynamic, render_movable_mask
from bevlab.errors import EmptyStaticMap, InsufficientViews
from bevlab.geometry import CameraModel, PointCloud, Pose, transform_cloud
from bevlab.synth import SceneConfig, generate_scene, render_frame, trajectory


def test_point_in_all_clouds_is_static():
    clouds = [PointCloud(np.array([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0 + i]]), i) for i in range(5)]
    m = build_static_map(clouds, 0.2, 2)
    assert m.contains(np.array([[1.0, 1.0, 1.0]]))[0]
    # the second point lands in a different voxel in every cloud
    assert len(m) == 5
    assert np.all(m.points == [1.0, 1.0, 1.0])


def test_needs_two_views():
    with pytest.raises(InsufficientViews):
        build_static_map([PointCloud(np.zeros((1, 3)))])


def test_stored_points_inside_their_voxels():
    rng = np.random.default_rng(0)
    clouds = [PointCloud(rng.uniform(-2, 2, (400, 3))) for _ in range(3)]
    m = build_static_map(clouds, 0.5, 2)
    for k, s, c in zip(m.keys, m.starts, m.counts):
        vox = np.floor(m.points[s : s + c] / 0.5)
        assert np.all(vox == vox[0])


def test_classify_examples():
    m = VoxelMap.from_points(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 5.0, 5.0]]), 0.2)
    q = PointCloud(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]))
    assert classify_dynamic(q, m, 1, 0.2).tolist() == [False, True]
    # exactly two neighbours within the ball, k = 3
    assert classify_dynamic(PointCloud(np.array([[0.05, 0.0, 0.0]])), m, 3, 0.2).tolist() == [True]
    assert classify_dynamic(PointCloud(np.array([[0.05, 0.0, 0.0]])), m, 2, 0.2).tolist() == [False]


def test_empty_static_map():
    with pytest.raises(EmptyStaticMap):
        classify_dynamic(PointCloud(np.zeros((1, 3))), VoxelMap.from_points(np.zeros((0, 3)), 0.2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.5), st.floats(0.1, 0.8))
def test_neighbour_counts_match_kdtree(seed, radius, voxel):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (300, 3))
    q = rng.uniform(-3.5, 3.5, (100, 3))
    m = VoxelMap.from_points(pts, voxel)
    tree = cKDTree(pts)
    expect = np.array([len(tree.query_ball_point(p, radius)) for p in q])
    got = m.count_within(q, radius)
    assert np.array_equal(got, expect)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_classification_monotone(seed):
    rng = np.random.default_rng(seed)
    m = VoxelMap.from_points(rng.uniform(-2, 2, (200, 3)), 0.2)
    q = PointCloud(rng.uniform(-2.5, 2.5, (60, 3)))
    d1 = classify_dynamic(q, m, 1, 0.2)
    d3 = classify_dynamic(q, m, 3, 0.2)
    assert np.all(d3 | ~d1)  # dynamic at k=1 stays dynamic at k=3
    big = classify_dynamic(q, m, 1, 0.5)
    assert np.all(d1 | ~big)  # static at small radius stays static at larger radius
    assert not classify_dynamic(q, m, 1, 100.0).any()


def test_movable_mask_examples():
    cam = CameraModel(100.0, 100.0, 64.0, 64.0, 128, 128)
    assert render_movable_mask(PointCloud(np.zeros((0, 3))), cam).max() == 0
    one = PointCloud(np.array([[0.0, 0.0, 3.0]]))
    m0 = render_movable_mask(one, cam, 0)
    assert m0.sum() == 1 and m0[64, 64] == 1
    m2 = render_movable_mask(one, cam, 2)
    assert m2.sum() == 25 and np.all(m2[62:67, 62:67] == 1)
    assert set(np.unique(m2)) <= {0, 1}
    m3 = render_movable_mask(one, cam, 3)
    assert np.all(m3 >= m2)


def test_synthetic_box_excluded_ground_kept():
    scene = generate_scene(18, SceneConfig())
    # a parked sensor: only the box moves, by more than its own length between views
    base = trajectory(scene, 31)[30]
    frames = [render_frame(scene, base, t=0.8 * i, with_images=False) for i in range(10)]
    world = [transform_cloud(f.scan, f.lidar_pose) for f in frames]
    m = build_static_map(world, 0.2, 2)
    box_pts = np.concatenate([w.points[~f.static] for w, f in zip(world, frames)])
    ground = np.concatenate([w.points[f.static] for w, f in zip(world, frames)])
    assert len(box_pts) > 0
    # points in the bottom voxel layer share voxels with ground seen from other views
    lifted = box_pts[box_pts[:, 2] - scene.height(box_pts[:, :2]) > 0.2]
    assert len(lifted) > 100
    assert m.contains(lifted).mean() <= 0.01
    assert m.contains(ground).mean() >= 0.99
