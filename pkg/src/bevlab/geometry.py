"""Pinhole camera model, rigid transforms and point clouds.

Conventions: world frame is right-handed and z-up. The camera frame is
x-right, y-down, z-forward. A :class:`Pose` maps points from its source
frame into its target frame, ``p_target = R @ p_source + t``. Camera
extrinsics map world points into the camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError, LengthMismatch


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise GeometryError(f"quaternion norm {np.linalg.norm(q)!r} is not 1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, R, t, timestamp: float = 0.0) -> "Pose":
        return cls(matrix_to_quat(R), t, timestamp)

    @classmethod
    def from_xyz_rpy(cls, xyz, roll=0.0, pitch=0.0, yaw=0.0, timestamp: float = 0.0) -> "Pose":
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cy, sy = np.cos(yaw), np.sin(yaw)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return cls.from_matrix(Rz @ Ry @ Rx, xyz, timestamp)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_homogeneous(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.translation

    def inverse(self) -> "Pose":
        R = self.matrix
        w, x, y, z = self.rotation
        return Pose(np.array([w, -x, -y, -z]), -R.T @ self.translation, self.timestamp)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        R = self.matrix @ other.matrix
        return Pose.from_matrix(R, self.matrix @ other.translation + self.translation, other.timestamp)

    @property
    def yaw(self) -> float:
        R = self.matrix
        return float(np.arctan2(R[1, 0], R[0, 0]))


@dataclass(frozen=True)
class PointCloud:
    """Timestamped points with optional per-point labels and features."""

    points: np.ndarray
    timestamp: float = 0.0
    labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    frame: str = "world"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.labels is not None:
            labels = np.asarray(self.labels).reshape(-1)
            if len(labels) != n:
                raise LengthMismatch(f"{len(labels)} labels for {n} points")
            object.__setattr__(self, "labels", labels)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim == 1:
                feats = feats.reshape(n, -1) if n else feats.reshape(0, 1)
            if len(feats) != n:
                raise LengthMismatch(f"{len(feats)} feature rows for {n} points")
            object.__setattr__(self, "features", feats)
        if self.frame not in ("world", "sensor"):
            raise GeometryError(f"unknown frame {self.frame!r}")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        return replace(
            self,
            points=self.points[index],
            labels=None if self.labels is None else self.labels[index],
            features=None if self.features is None else self.features[index],
        )

    @classmethod
    def empty(cls, timestamp: float = 0.0, frame: str = "world") -> "PointCloud":
        return cls(np.zeros((0, 3)), timestamp, frame=frame)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")
        R = self.extrinsics.matrix
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("extrinsic rotation is not a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in world coordinates."""
        return self.extrinsics.inverse().translation

    def with_extrinsics(self, extrinsics: Pose) -> "CameraModel":
        return replace(self, extrinsics=extrinsics)

    def project_points(self, points_world) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (N, 2) and camera-frame depth (N,)."""
        pc = self.extrinsics.apply(points_world)
        uvd = pc @ self.K.T
        d = uvd[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = uvd[:, :2] / d[:, None]
        return uv, d

    def backproject_points(self, uv, depth) -> np.ndarray:
        """Inverse of :meth:`project_points` for continuous pixel coordinates."""
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        d = np.asarray(depth, dtype=float).reshape(-1)
        uvd = np.column_stack([uv[:, 0] * d, uv[:, 1] * d, d])
        pc = uvd @ np.linalg.inv(self.K).T
        R = self.extrinsics.matrix
        t = self.extrinsics.translation
        # [R^T | -R^T t] applied to camera-frame points
        return pc @ R - R.T @ t

    def pixel_rays(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """World-frame ray origin and directions scaled so that unit step = unit depth."""
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        dirs_cam = np.column_stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))])
        return self.center, dirs_cam @ self.extrinsics.matrix


@dataclass(frozen=True)
class Projection:
    pixels: np.ndarray  # (M, 2) integer (u, v)
    depth: np.ndarray  # (M,)
    index: np.ndarray  # (M,) indices into the source cloud
    omitted: int


def project_cloud(cloud: PointCloud, camera: CameraModel) -> Projection:
    """Project world points to integer pixels, dropping points behind the camera or outside the image."""
    uv, d = camera.project_points(cloud.points)
    ok = d > 0
    pix = np.zeros((len(d), 2), dtype=np.int64)
    pix[ok] = np.rint(uv[ok]).astype(np.int64)
    ok &= (pix[:, 0] >= 0) & (pix[:, 0] < camera.width) & (pix[:, 1] >= 0) & (pix[:, 1] < camera.height)
    idx = np.flatnonzero(ok)
    return Projection(pix[idx], d[idx], idx, int(len(d) - len(idx)))


def render_depth(proj: Projection, camera: CameraModel) -> np.ndarray:
    """Z-buffer a projection into a depth image (0 = no return); nearest depth wins."""
    depth = np.zeros(camera.shape)
    if len(proj.depth) == 0:
        return depth
    flat = proj.pixels[:, 1] * camera.width + proj.pixels[:, 0]
    order = np.lexsort((proj.depth, flat))
    flat, d = flat[order], proj.depth[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth.flat[flat[first]] = d[first]
    return depth


def backproject_depth(depth, camera: CameraModel, timestamp: float = 0.0) -> PointCloud:
    """One world point per valid (> 0) pixel. Point order is row-major over pixels."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != camera.shape:
        raise GeometryError(f"depth image {depth.shape} does not match camera {camera.shape}")
    v, u = np.nonzero(depth > 0)
    pts = camera.backproject_points(np.column_stack([u, v]), depth[v, u])
    return PointCloud(pts, timestamp)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    return replace(cloud, points=pose.apply(cloud.points), frame="world")


def accumulate_clouds(clouds: Sequence[PointCloud], poses: Sequence[Pose], time_tol: float = 1e-6) -> PointCloud:
    """Transform each sensor-frame cloud by its pose and concatenate."""
    if len(clouds) != len(poses):
        raise LengthMismatch(f"{len(clouds)} clouds but {len(poses)} poses")
    if not clouds:
        return PointCloud.empty()
    for c, p in zip(clouds, poses):
        if abs(c.timestamp - p.timestamp) > time_tol:
            raise LengthMismatch(f"cloud at t={c.timestamp} paired with pose at t={p.timestamp}")
    moved = [transform_cloud(c, p) for c, p in zip(clouds, poses)]
    has_labels = all(c.labels is not None for c in moved)
    has_feats = all(c.features is not None for c in moved)
    return PointCloud(
        np.concatenate([c.points for c in moved]),
        timestamp=clouds[-1].timestamp,
        labels=np.concatenate([c.labels for c in moved]) if has_labels else None,
        features=np.concatenate([c.features for c in moved]) if has_feats else None,
    )


def mounted_camera(intrinsics: CameraModel, mount: Pose, base_pose: Pose) -> CameraModel:
    """Camera whose camera->base transform is ``mount`` with the base at ``base_pose`` (base->world)."""
    cam_to_world = base_pose.compose(mount)
    return intrinsics.with_extrinsics(cam_to_world.inverse())


# Camera optical frame expressed in a body frame with x-forward, y-left, z-up.
OPTICAL_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(xyz, pitch: float = 0.0, yaw: float = 0.0) -> Pose:
    """camera->body pose for a forward camera pitched down by ``pitch`` radians."""
    tilt = Pose.from_xyz_rpy(xyz, pitch=pitch, yaw=yaw).matrix
    return Pose.from_matrix(tilt @ OPTICAL_TO_BODY, xyz)
