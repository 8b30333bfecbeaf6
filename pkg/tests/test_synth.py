import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from bevlab.errors import PoseOutsideScene, ValidationError
from bevlab.geometry import Pose, project_cloud, render_depth, transform_cloud
from bevlab.synth import (
    BOX_INSTANCE_BASE, LidarConfig, RigConfig, SceneConfig, generate_scene, lidar_rays, render_frame, trajectory,
)

SMALL = RigConfig(width=64, height=48, fx=40.0, fy=40.0, supersample=1)


def test_same_seed_same_scene():
    a, b = generate_scene(3), generate_scene(3)
    for f in ("seeds", "offsets", "slopes", "classes", "instances"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.array_equal(a.boxes[0].center0, b.boxes[0].center0)
    fa = render_frame(a, trajectory(a, 1)[0], SMALL)
    fb = render_frame(b, trajectory(b, 1)[0], SMALL)
    assert np.array_equal(fa.scan.points, fb.scan.points)
    assert np.array_equal(fa.left, fb.left) and np.array_equal(fa.depth, fb.depth)


def test_single_region_single_label():
    scene = generate_scene(1, SceneConfig(num_regions=1, num_dynamic=0))
    f = render_frame(scene, trajectory(scene, 1)[0], SMALL)
    assert set(np.unique(f.scan.labels)) == {1}
    assert set(np.unique(f.class_mask[f.depth > 0])) == {1}


def test_no_dynamic_all_static():
    scene = generate_scene(2, SceneConfig(num_dynamic=0))
    f = render_frame(scene, trajectory(scene, 1)[0], SMALL)
    assert f.static.all()
    assert f.movable.max() == 0


def test_num_regions_validated():
    with pytest.raises(ValidationError):
        generate_scene(0, SceneConfig(num_regions=0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_heights_in_range_and_regions_tile(seed):
    scene = generate_scene(seed, SceneConfig(max_slope=0.05, elevation_span=(-1.0, 1.5)))
    xy = np.random.default_rng(seed).uniform(-scene.extent, scene.extent, (2000, 2))
    h = scene.height(xy)
    assert np.all((h >= -1.2) & (h <= 1.8))
    reg = scene.region_of(xy)
    assert np.all((reg >= 0) & (reg < scene.num_regions))


def test_flat_scene_depth_is_closed_form():
    scene = generate_scene(5, SceneConfig(num_regions=1, num_dynamic=0, elevation_span=(0.0, 0.0), ramp_fraction=0.0))
    rig = RigConfig(width=64, height=48, fx=40.0, fy=40.0, supersample=1, camera_pitch_deg=10.0)
    f = render_frame(scene, Pose.from_xyz_rpy([0.0, 0.0, 0.0], yaw=0.3), rig)
    cam = f.camera
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    o, d = cam.pixel_rays(np.column_stack([uu.ravel(), vv.ravel()]))
    s = -o[2] / d[:, 2]  # ray parameter at z = 0; unit step is unit camera depth
    expect = np.where((d[:, 2] < 0) & (s <= rig.depth_max), s, 0.0).reshape(cam.shape)
    assert (expect > 0).any() and (expect == 0).any()
    np.testing.assert_allclose(f.depth, expect, rtol=0, atol=1e-6)


def test_box_pixels_flagged_movable():
    scene = generate_scene(18)
    poses = trajectory(scene, 50)
    hits = 0
    for p in poses[::7]:
        f = render_frame(scene, p, SMALL)
        box = f.instance_mask >= BOX_INSTANCE_BASE
        assert np.array_equal(box, f.movable.astype(bool))
        hits += box.sum()
        assert np.all(f.scan.labels[~f.static] == 0)
    assert hits > 0


def test_lidar_point_budget():
    cfg = LidarConfig(rings=8, points_per_ring=90, max_range=12.0)
    rig = RigConfig(width=32, height=24, fx=20.0, fy=20.0, supersample=1, lidar=cfg)
    scene = generate_scene(6)
    f = render_frame(scene, trajectory(scene, 1)[0], rig, with_images=False)
    o = f.lidar_pose.translation
    dirs = lidar_rays(cfg) @ f.lidar_pose.matrix.T
    s, kind, _ = scene.cast(o, dirs, f.timestamp)
    missed = int(((kind == 0) | (s > cfg.max_range)).sum())
    assert len(f.scan) == cfg.rings * cfg.points_per_ring - missed
    assert np.all(np.linalg.norm(f.scan.points, axis=1) <= cfg.max_range + 1e-9)


def test_scan_consistent_with_depth_render():
    scene = generate_scene(7, SceneConfig(num_dynamic=0))
    f = render_frame(scene, trajectory(scene, 1)[0], SMALL)
    world = transform_cloud(f.scan, f.lidar_pose)
    proj = project_cloud(world, f.camera)
    assert len(proj.depth) > 20
    # a ray through each point's exact sub-pixel position meets the scene at that point's depth
    uv, z = f.camera.project_points(world.points[proj.index])
    o, d = f.camera.pixel_rays(uv)
    s, kind, _ = scene.cast(o, d, f.timestamp)
    np.testing.assert_allclose(s, z, rtol=0, atol=1e-6)
    # at rounded pixels the rendered depth image sits within the sub-pixel footprint of the point
    sparse = render_depth(proj, f.camera)
    both = (sparse > 0) & (f.depth > 0)
    assert np.median(np.abs(sparse[both] - f.depth[both]) / f.depth[both]) < 0.05


def test_pose_outside_scene():
    scene = generate_scene(1)
    with pytest.raises(PoseOutsideScene):
        render_frame(scene, Pose.from_xyz_rpy([scene.extent, 0.0, 0.0]), SMALL)


def test_shuffled_instances_are_a_relabeling():
    scene = generate_scene(9, SceneConfig(num_dynamic=0))
    p = trajectory(scene, 1)[0]
    a = render_frame(scene, p, SMALL)
    b = render_frame(scene, p, SMALL, shuffle_instances=True)
    pairs = set(zip(a.instance_mask.ravel().tolist(), b.instance_mask.ravel().tolist()))
    assert len(pairs) == len({x for x, _ in pairs}) == len({y for _, y in pairs})


def test_split_instances_doubles_ids():
    scene = generate_scene(10, SceneConfig(split_instances=True, num_dynamic=0))
    xy = np.random.default_rng(0).uniform(-30, 30, (5000, 2))
    ids = scene.instance_of(xy)
    assert ids.max() > scene.num_regions
    # each instance still sits in one class
    cls = scene.class_of(xy)
    for i in np.unique(ids):
        assert len(np.unique(cls[ids == i])) == 1
