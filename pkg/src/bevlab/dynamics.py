"""Static voxel map, KNN occupancy test for dynamic points, and movable-pixel masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import EmptyStaticMap, InsufficientViews, ValidationError
from .geometry import CameraModel, PointCloud, project_cloud

_OFFSET = np.int64(1 << 20)
_SPAN = np.int64(1 << 21)


def _voxel_keys(vox: np.ndarray) -> np.ndarray:
    v = vox.astype(np.int64) + _OFFSET
    return (v[:, 0] * _SPAN + v[:, 1]) * _SPAN + v[:, 2]


@dataclass(frozen=True)
class VoxelMap:
    """Static points grouped by voxel; ``points`` is sorted by voxel key."""

    voxel_size: float
    points: np.ndarray
    keys: np.ndarray  # unique sorted voxel keys
    starts: np.ndarray  # start offset of each key's run in ``points``
    counts: np.ndarray

    @classmethod
    def from_points(cls, points, voxel_size: float) -> "VoxelMap":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        keys = _voxel_keys(np.floor(points / voxel_size))
        order = np.argsort(keys, kind="stable")
        points, keys = points[order], keys[order]
        ukeys, starts, counts = np.unique(keys, return_index=True, return_counts=True)
        return cls(voxel_size, points, ukeys, starts, counts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_voxels(self) -> int:
        return len(self.keys)

    def contains(self, points) -> np.ndarray:
        """True where a point's voxel is occupied in the map."""
        k = _voxel_keys(np.floor(np.asarray(points, dtype=float).reshape(-1, 3) / self.voxel_size))
        pos = np.clip(np.searchsorted(self.keys, k), 0, max(len(self.keys) - 1, 0))
        return (self.keys[pos] == k) if len(self.keys) else np.zeros(len(k), dtype=bool)

    def count_within(self, query, radius: float, cap: int | None = None, chunk: int = 4096) -> np.ndarray:
        """Exact number of map points within ``radius`` of each query point (optionally capped)."""
        query = np.asarray(query, dtype=float).reshape(-1, 3)
        reach = int(np.ceil(radius / self.voxel_size))
        if (2 * reach + 1) ** 3 > max(self.num_voxels, 27):
            # the ball covers more voxels than the map has; plain distances are cheaper
            out = self._count_brute(query, radius, chunk)
            return out if cap is None else np.minimum(out, cap)
        rng = np.arange(-reach, reach + 1)
        offsets = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
        r2 = radius * radius
        out = np.zeros(len(query), dtype=np.int64)
        for s in range(0, len(query), chunk):
            q = query[s : s + chunk]
            base = np.floor(q / self.voxel_size).astype(np.int64)
            tally = np.zeros(len(q), dtype=np.int64)
            for off in offsets:
                k = _voxel_keys(base + off)
                pos = np.searchsorted(self.keys, k)
                pos_c = np.minimum(pos, len(self.keys) - 1)
                hit = self.keys[pos_c] == k
                if not hit.any():
                    continue
                qi = np.flatnonzero(hit)
                st = self.starts[pos_c[qi]]
                ct = self.counts[pos_c[qi]]
                rep_q = np.repeat(qi, ct)
                # positions st[i] .. st[i]+ct[i]-1 for each hit
                run_start = np.repeat(st - np.cumsum(ct) + ct, ct)
                pidx = run_start + np.arange(ct.sum())
                d2 = ((self.points[pidx] - q[rep_q]) ** 2).sum(axis=1)
                tally += np.bincount(rep_q[d2 <= r2], minlength=len(q))
            out[s : s + chunk] = tally
        return out if cap is None else np.minimum(out, cap)

    def _count_brute(self, query, radius: float, chunk: int) -> np.ndarray:
        out = np.zeros(len(query), dtype=np.int64)
        step = max(1, chunk * 64 // max(len(self.points), 1))
        for s in range(0, len(query), step):
            q = query[s : s + step]
            d2 = ((q[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
            out[s : s + step] = (d2 <= radius * radius).sum(axis=1)
        return out


def build_static_map(clouds: Sequence[PointCloud], voxel_size: float = 0.2, min_observations: int = 2) -> VoxelMap:
    """Keep points whose voxel is occupied in at least ``min_observations`` distinct clouds."""
    if len(clouds) < 2:
        raise InsufficientViews(f"need >= 2 clouds, got {len(clouds)}")
    if voxel_size <= 0 or min_observations < 1:
        raise ValidationError("voxel_size > 0 and min_observations >= 1 required")
    per_cloud = [np.unique(_voxel_keys(np.floor(c.points / voxel_size))) for c in clouds]
    allk, nobs = np.unique(np.concatenate(per_cloud), return_counts=True)
    static_keys = allk[nobs >= min_observations]
    pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
    keys = _voxel_keys(np.floor(pts / voxel_size))
    keep = np.isin(keys, static_keys)
    return VoxelMap.from_points(pts[keep], voxel_size)


def classify_dynamic(query: PointCloud, static_map: VoxelMap, k: int = 1, radius: float = 0.2) -> np.ndarray:
    """Boolean per query point: True = dynamic (fewer than ``k`` static neighbours within ``radius``)."""
    if k < 1 or radius <= 0:
        raise ValidationError("k >= 1 and radius > 0 required")
    if len(static_map) == 0:
        raise EmptyStaticMap("static map has no points")
    return static_map.count_within(query.points, radius) < k


def render_movable_mask(dynamic_points: PointCloud, camera: CameraModel, dilation: int = 2) -> np.ndarray:
    """Binary uint8 mask of pixels hit by dynamic points, dilated by a square of radius ``dilation``."""
    mask = np.zeros(camera.shape, dtype=bool)
    if len(dynamic_points):
        proj = project_cloud(dynamic_points, camera)
        mask[proj.pixels[:, 1], proj.pixels[:, 0]] = True
    if dilation > 0 and mask.any():
        mask = binary_dilation(mask, np.ones((2 * dilation + 1,) * 2, dtype=bool))
    return mask.astype(np.uint8)
