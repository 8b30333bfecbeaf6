"""Ground-truth BEV semantic, elevation and observation grids."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import LengthMismatch, UnlabeledCloud
from .geometry import CameraModel, PointCloud
from .grid import OBSERVED, OCCLUDED, OUTSIDE, BevGrid, GridConfig
from .mask_bev import cell_majority

ELEV_MIN, ELEV_MAX = -1.2, 1.8


def _flat_cells(points, grid: GridConfig):
    r, c, inside = grid.cell_of(points[:, :2])
    return r * grid.cells_w + c, inside


def build_semantic_map(clouds: Sequence[PointCloud], grid: GridConfig) -> BevGrid:
    """Majority class per cell over all labelled points; label 0 means unlabelled and is ignored."""
    if any(c.labels is None for c in clouds):
        raise UnlabeledCloud("every cloud needs class labels")
    if clouds:
        pts = np.concatenate([c.points for c in clouds])
        labels = np.concatenate([c.labels for c in clouds]).astype(np.int64)
    else:
        pts, labels = np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    flat, inside = _flat_cells(pts, grid)
    use = inside & (labels > 0)
    sem = cell_majority(flat[use], labels[use], grid.cells_h * grid.cells_w).reshape(grid.shape)
    return BevGrid(grid, sem, (sem > 0).astype(np.uint8), "labels")


def build_elevation_map(
    clouds: Sequence[PointCloud], static_flags, grid: GridConfig, bottom_k: int = 3,
    elev_range: tuple[float, float] = (ELEV_MIN, ELEV_MAX),
) -> BevGrid:
    """Mean z of the ``bottom_k`` lowest static points per cell, clamped to ``elev_range``."""
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
    # one flag array per cloud, or a single array over the concatenation
    if isinstance(static_flags, np.ndarray) and static_flags.ndim == 1:
        flags = static_flags.astype(bool)
    else:
        parts = [np.asarray(f, dtype=bool).reshape(-1) for f in static_flags]
        flags = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
    if len(flags) != len(pts):
        raise LengthMismatch(f"{len(flags)} static flags for {len(pts)} points")
    flat, inside = _flat_cells(pts, grid)
    use = inside & flags
    cells, z = flat[use], pts[use, 2]
    ncell = grid.cells_h * grid.cells_w
    elev = np.zeros(ncell)
    valid = np.zeros(ncell, dtype=np.uint8)
    if len(cells):
        order = np.lexsort((z, cells))
        cells, z = cells[order], z[order]
        starts = np.flatnonzero(np.r_[True, cells[1:] != cells[:-1]])
        rank = np.arange(len(cells)) - np.repeat(starts, np.diff(np.r_[starts, len(cells)]))
        low = rank < bottom_k
        sums = np.bincount(cells[low], weights=z[low], minlength=ncell)
        cnt = np.bincount(cells[low], minlength=ncell)
        hit = cnt > 0
        elev[hit] = np.clip(sums[hit] / cnt[hit], *elev_range)
        valid[hit] = 1
    return BevGrid(grid, elev.reshape(grid.shape), valid.reshape(grid.shape), "float")


def observation_partition(frame_cloud: PointCloud, camera: CameraModel, grid: GridConfig, ground_z: float = 0.0,
                          max_range: float | None = None) -> BevGrid:
    """Per-cell OBSERVED / OCCLUDED / OUTSIDE codes for one scan.

    A cell is observed when the scan has a point in it, occluded when it is
    not observed but its centre (at height ``ground_z``) projects into the
    image in front of the camera, and outside otherwise.
    """
    flat, inside = _flat_cells(frame_cloud.points, grid)
    ncell = grid.cells_h * grid.cells_w
    observed = np.zeros(ncell, dtype=bool)
    observed[flat[inside]] = True
    centers = grid.cell_centers().reshape(-1, 2)
    pts = np.column_stack([centers, np.full(len(centers), ground_z)])
    uv, d = camera.project_points(pts)
    in_view = (d > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] < camera.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < camera.height - 0.5)
    if max_range is not None:
        in_view &= d <= max_range
    codes = np.full(ncell, OUTSIDE, dtype=np.uint8)
    codes[in_view] = OCCLUDED
    codes[observed] = OBSERVED
    codes = codes.reshape(grid.shape)
    return BevGrid(grid, codes, None, "validity")
