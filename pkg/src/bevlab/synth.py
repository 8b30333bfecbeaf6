"""Deterministic synthetic scenes with analytic ground truth.

The ground is a set of Voronoi regions, each carrying a constant or gently
ramped plane, a class id and an instance id. Steps between regions have no
walls: rays are intersected exactly with each region's plane patch, so every
rendered depth, label and elevation is analytic. Axis-aligned boxes move on
linear trajectories and stand in for dynamic agents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import PoseOutsideScene, ValidationError
from .geometry import CameraModel, PointCloud, Pose, camera_mount, mounted_camera

SKY_INTENSITY = 230.0
BOX_INSTANCE_BASE = 1000


@dataclass(frozen=True)
class SceneConfig:
    num_regions: int = 5
    num_classes: Optional[int] = None  # defaults to num_regions
    num_dynamic: int = 1
    extent: float = 60.0  # half-width of the square scene
    ramp_fraction: float = 0.5
    max_slope: float = 0.005
    elevation_span: tuple = (-0.3, 0.3)
    split_instances: bool = False
    box_speed: tuple = (1.5, 2.5)


@dataclass(frozen=True)
class DynamicBox:
    center0: np.ndarray
    half_extent: np.ndarray
    velocity: np.ndarray
    instance: int

    def center(self, t: float) -> np.ndarray:
        return self.center0 + self.velocity * t


@dataclass
class Scene:
    seed: int
    extent: float
    seeds: np.ndarray  # (R, 2) Voronoi sites
    offsets: np.ndarray  # (R,) plane height at the site
    slopes: np.ndarray  # (R, 2) plane gradient
    classes: np.ndarray  # (R,) class ids, >= 1
    instances: np.ndarray  # (R,) instance ids, >= 1
    split_normals: Optional[np.ndarray] = None  # (R, 2); second instance id on the positive side
    boxes: list = field(default_factory=list)

    @property
    def num_regions(self) -> int:
        return len(self.seeds)

    def region_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        d = ((xy[..., None, :] - self.seeds) ** 2).sum(-1)
        return d.argmin(-1)

    def _plane(self, region, xy):
        return self.offsets[region] + ((xy - self.seeds[region]) * self.slopes[region]).sum(-1)

    def height(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return self._plane(self.region_of(xy), xy)

    def class_of(self, xy) -> np.ndarray:
        return self.classes[self.region_of(xy)]

    def instance_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        reg = self.region_of(xy)
        inst = self.instances[reg]
        if self.split_normals is not None:
            side = ((xy - self.seeds[reg]) * self.split_normals[reg]).sum(-1) > 0
            inst = np.where(side, inst + self.num_regions, inst)
        return inst

    def interior_cells(self, centers, half: float) -> np.ndarray:
        """True where a square cell's centre and four corners share one region."""
        reg = self.region_of(centers)
        ok = np.ones(reg.shape, dtype=bool)
        for dx, dy in ((-half, -half), (-half, half), (half, -half), (half, half)):
            ok &= self.region_of(centers + np.array([dx, dy])) == reg
        return ok

    # -- ray casting ----------------------------------------------------------

    def cast(self, origins, dirs, t: float):
        """Exact first hit of each ray. ``dirs`` need not be unit length; returned ``s`` is the ray parameter.

        Returns (s, kind, index) with kind 0 = none, 1 = ground, 2 = box; index
        is the region or box number.
        """
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
        n = len(dirs)
        best = np.full(n, np.inf)
        kind = np.zeros(n, dtype=np.int64)
        index = np.full(n, -1, dtype=np.int64)
        eps = 1e-9
        for r in range(self.num_regions):
            g = self.slopes[r]
            denom = dirs[:, 2] - dirs[:, :2] @ g
            num = self.offsets[r] + (origins[:, :2] - self.seeds[r]) @ g - origins[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = num / denom
            ok = np.isfinite(s) & (s > eps) & (s < best)
            if not ok.any():
                continue
            idx = np.flatnonzero(ok)
            xy = origins[idx, :2] + s[idx, None] * dirs[idx, :2]
            inside = (self.region_of(xy) == r) & (np.abs(xy) <= self.extent).all(-1)
            idx = idx[inside]
            best[idx] = s[idx]
            kind[idx] = 1
            index[idx] = r
        for b, box in enumerate(self.boxes):
            c = box.center(t)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t1 = (c - box.half_extent - origins) * inv
                t2 = (c + box.half_extent - origins) * inv
            t1 = np.nan_to_num(t1, nan=-np.inf)
            t2 = np.nan_to_num(t2, nan=np.inf)
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            hit = (tmin <= tmax) & (tmin > eps) & (tmin < best)
            best[hit] = tmin[hit]
            kind[hit] = 2
            index[hit] = b
        return best, kind, index

    def intensity(self, points, kind, index) -> np.ndarray:
        out = np.full(len(points), SKY_INTENSITY)
        g = kind == 1
        if g.any():
            base = 50.0 + 25.0 * (index[g] % 5)
            out[g] = base + 100.0 * _octave_noise(points[g, 0], points[g, 1], self.seed)
        b = kind == 2
        if b.any():
            p = points[b]
            out[b] = 120.0 + 100.0 * _octave_noise(p[:, 0] + p[:, 1], p[:, 2], self.seed + 17)
        return out


def _hash01(ix, iy, seed):
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
    h ^= np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x165667B19E3779F9)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x, y, scale, seed):
    gx, gy = x / scale, y / scale
    ix, iy = np.floor(gx), np.floor(gy)
    fx, fy = gx - ix, gy - iy
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    v00, v10 = _hash01(ix, iy, seed), _hash01(ix + 1, iy, seed)
    v01, v11 = _hash01(ix, iy + 1, seed), _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy


def _octave_noise(x, y, seed):
    with np.errstate(over="ignore"):
        return (0.5 * _value_noise(x, y, 0.08, seed) + 0.3 * _value_noise(x, y, 0.2, seed + 1)
                + 0.2 * _value_noise(x, y, 0.5, seed + 2))


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    if cfg.num_regions < 1:
        raise ValidationError("num_regions must be >= 1")
    rng = np.random.default_rng(seed)
    R = cfg.num_regions
    E = cfg.extent
    # sites spread over the central part so every region reaches the driving area
    seeds = rng.uniform(-0.25 * E, 0.25 * E, size=(R, 2))
    lo, hi = cfg.elevation_span
    offsets = rng.uniform(lo, hi, size=R)
    ramp = rng.random(R) < cfg.ramp_fraction
    slopes = rng.uniform(-cfg.max_slope, cfg.max_slope, size=(R, 2)) * ramp[:, None]
    ncls = cfg.num_classes or R
    classes = (np.arange(R) % ncls) + 1
    rng.shuffle(classes)
    instances = np.arange(1, R + 1)
    split = None
    if cfg.split_instances:
        ang = rng.uniform(0, 2 * np.pi, size=R)
        split = np.column_stack([np.cos(ang), np.sin(ang)])
    boxes = []
    for b in range(cfg.num_dynamic):
        half = rng.uniform([0.3, 0.3, 0.5], [0.6, 0.6, 0.9])
        start = np.array([rng.uniform(-1.0, 2.0), rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 6.0)])
        speed = rng.uniform(*cfg.box_speed)
        vel = np.array([0.0, -np.sign(start[1]) * speed, 0.0])
        # bottom sits 0.3 m below the ground at the start so small steps show no gap
        site = ((seeds - start) ** 2).sum(1).argmin()
        ground = offsets[site] + (start - seeds[site]) @ slopes[site]
        cz = ground - 0.3 + half[2]
        boxes.append(DynamicBox(np.array([start[0], start[1], cz]), half, vel, BOX_INSTANCE_BASE + b))
    scene = Scene(seed, E, seeds, offsets, slopes, classes.astype(np.int64), instances, split, boxes)
    # keep the heightfield inside the representable elevation range
    corners = np.array([[-E, -E], [-E, E], [E, -E], [E, E]], dtype=float)
    for r in range(R):
        z = offsets[r] + (corners - seeds[r]) @ slopes[r]
        if z.min() < -1.2 or z.max() > 1.8:
            slopes[r] = 0.0
    return scene


# -- sensors ------------------------------------------------------------------


@dataclass(frozen=True)
class LidarConfig:
    rings: int = 16
    points_per_ring: int = 360
    min_elevation_deg: float = -25.0
    max_elevation_deg: float = 5.0
    max_range: float = 30.0
    range_noise: float = 0.0
    mount_height: float = 1.0


@dataclass(frozen=True)
class RigConfig:
    width: int = 256
    height: int = 192
    fx: float = 160.0
    fy: float = 160.0
    camera_xyz: tuple = (0.2, 0.0, 1.2)
    camera_pitch_deg: float = 40.0
    baseline: float = 0.2
    depth_max: float = 51.2
    supersample: int = 2
    lidar: LidarConfig = field(default_factory=LidarConfig)

    def intrinsics(self) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.width / 2.0, self.height / 2.0, self.width, self.height)

    @property
    def lidar_mount(self) -> Pose:
        return Pose(translation=[0.0, 0.0, self.lidar.mount_height])

    @property
    def camera_to_lidar(self) -> Pose:
        """camera->lidar mount used in camera files."""
        x, y, z = self.camera_xyz
        return camera_mount([x, y, z - self.lidar.mount_height], np.deg2rad(self.camera_pitch_deg))


@dataclass
class RenderedFrame:
    timestamp: float
    base_pose: Pose  # base->world
    lidar_pose: Pose  # lidar->world
    scan: PointCloud  # lidar frame, labels = class ids (0 on boxes)
    instances: np.ndarray
    static: np.ndarray
    camera: CameraModel  # left camera, world->camera extrinsics
    right_camera: CameraModel
    depth: np.ndarray
    left: np.ndarray
    right: np.ndarray
    instance_mask: np.ndarray
    class_mask: np.ndarray
    movable: np.ndarray


def lidar_rays(cfg: LidarConfig) -> np.ndarray:
    elev = np.deg2rad(np.linspace(cfg.min_elevation_deg, cfg.max_elevation_deg, cfg.rings))
    az = np.linspace(-np.pi, np.pi, cfg.points_per_ring, endpoint=False)
    E, A = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)


def base_pose_at(scene: Scene, xy, yaw: float, t: float) -> Pose:
    xy = np.asarray(xy, dtype=float)
    z = float(scene.height(xy[None])[0])
    return Pose.from_xyz_rpy([xy[0], xy[1], z], yaw=yaw, timestamp=t)


def trajectory(scene: Scene, n: int, dt: float = 0.1, speed: float = 1.0, start=(-5.0, 0.0), yaw: float = 0.0,
               t0: float = 0.0) -> list[Pose]:
    heading = np.array([np.cos(yaw), np.sin(yaw)])
    return [base_pose_at(scene, np.asarray(start) + heading * speed * i * dt, yaw, t0 + i * dt) for i in range(n)]


def _shuffle_ids(ids: np.ndarray, seed: int, t: float) -> np.ndarray:
    uniq = np.unique(ids[ids > 0])
    if len(uniq) == 0:
        return ids
    rng = np.random.default_rng([seed, int(round(t * 1000))])
    perm = rng.permutation(len(uniq)) + 1
    out = np.zeros_like(ids)
    out[ids > 0] = perm[np.searchsorted(uniq, ids[ids > 0])]
    return out


def render_scan(scene: Scene, lidar_pose: Pose, cfg: LidarConfig, t: float):
    dirs_s = lidar_rays(cfg)
    dirs_w = dirs_s @ lidar_pose.matrix.T
    s, kind, index = scene.cast(lidar_pose.translation, dirs_w, t)
    keep = (kind > 0) & (s <= cfg.max_range)
    rng_s = s[keep]
    if cfg.range_noise > 0:
        noise_rng = np.random.default_rng([scene.seed, 7, int(round(t * 1000))])
        rng_s = rng_s + noise_rng.normal(0.0, cfg.range_noise, size=len(rng_s))
    pts_s = dirs_s[keep] * rng_s[:, None]
    pts_w = lidar_pose.apply(pts_s)
    k, i = kind[keep], index[keep]
    labels = np.where(k == 1, scene.classes[np.maximum(i, 0)], 0)
    inst = np.where(k == 1, scene.instance_of(pts_w[:, :2]), BOX_INSTANCE_BASE + np.maximum(i, 0))
    return PointCloud(pts_s, t, labels.astype(np.int64), frame="sensor"), inst, k == 1


def render_view(scene: Scene, camera: CameraModel, t: float, depth_max: float, supersample: int = 1):
    h, w = camera.shape
    vv, uu = np.mgrid[0:h, 0:w]
    uv = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    origin, dirs = camera.pixel_rays(uv)
    s, kind, index = scene.cast(origin, dirs, t)
    hit = kind > 0
    pts = origin + np.where(hit, s, 0.0)[:, None] * dirs
    depth = np.where(hit & (s <= depth_max), s, 0.0)
    if supersample > 1:
        # anti-aliased intensities: mean over a regular sub-pixel grid
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        acc = np.zeros(len(uv))
        for oy in offs:
            for ox in offs:
                o2, d2 = camera.pixel_rays(uv + np.array([ox, oy]))
                s2, k2, i2 = scene.cast(o2, d2, t)
                p2 = o2 + np.where(np.isfinite(s2), s2, 0.0)[:, None] * d2
                acc += scene.intensity(p2, k2, i2)
        gray = acc / supersample**2
    else:
        gray = scene.intensity(pts, kind, index)
    inst = np.zeros(len(uv), dtype=np.int64)
    cls = np.zeros(len(uv), dtype=np.int64)
    g = kind == 1
    inst[g] = scene.instance_of(pts[g, :2])
    cls[g] = scene.classes[index[g]]
    b = kind == 2
    inst[b] = BOX_INSTANCE_BASE + index[b]
    return (depth.reshape(h, w), gray.reshape(h, w), inst.reshape(h, w), cls.reshape(h, w),
            b.reshape(h, w).astype(np.uint8))


def render_frame(scene: Scene, base_pose: Pose, rig: RigConfig = RigConfig(), t: Optional[float] = None,
                 shuffle_instances: bool = False, with_images: bool = True) -> RenderedFrame:
    t = base_pose.timestamp if t is None else t
    xy = base_pose.translation[:2]
    if np.any(np.abs(xy) > scene.extent - rig.lidar.max_range * 0.25):
        raise PoseOutsideScene(f"pose {xy} too close to the scene border")
    lidar_pose = base_pose.compose(rig.lidar_mount)
    lidar_pose = Pose(lidar_pose.rotation, lidar_pose.translation, t)
    scan, inst, static = render_scan(scene, lidar_pose, rig.lidar, t)
    cam = mounted_camera(rig.intrinsics(), rig.camera_to_lidar, lidar_pose)
    right_cam = cam.with_extrinsics(Pose(translation=[-rig.baseline, 0.0, 0.0]).compose(cam.extrinsics))
    if with_images:
        depth, left, imask, cmask, movable = render_view(scene, cam, t, rig.depth_max, rig.supersample)
        _, right, _, _, _ = render_view(scene, right_cam, t, rig.depth_max, rig.supersample)
        if shuffle_instances:
            imask = _shuffle_ids(imask, scene.seed, t)
    else:
        depth = left = right = imask = cmask = movable = None
    return RenderedFrame(t, base_pose, lidar_pose, scan, inst, static, cam, right_cam, depth, left, right,
                         imask, cmask, movable)


def analytic_grids(scene: Scene, grid):
    """Analytic class and height at every cell centre of ``grid``."""
    centers = grid.cell_centers()
    return scene.class_of(centers), scene.height(centers)
