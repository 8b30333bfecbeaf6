"""Soft-quantization splatting of point features onto a BEV grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ValidationError
from .grid import BevGrid, GridConfig


@dataclass
class SplatResult:
    features: BevGrid
    weight: BevGrid
    dropped: int  # points with no corner inside the grid


def bilinear_corners(g: np.ndarray):
    """Four (row, col) cell indices and bilinear weights around continuous grid coords ``g`` (N, 2).

    Cell centres sit at half-integer coordinates, so a point at a centre puts
    all its weight on that cell.
    """
    s = g - 0.5
    base = np.floor(s).astype(np.int64)
    f = s - base
    rows = np.stack([base[:, 0], base[:, 0], base[:, 0] + 1, base[:, 0] + 1], axis=1)
    cols = np.stack([base[:, 1], base[:, 1] + 1, base[:, 1], base[:, 1] + 1], axis=1)
    wr0, wc0 = 1.0 - f[:, 0], 1.0 - f[:, 1]
    weights = np.stack([wr0 * wc0, wr0 * f[:, 1], f[:, 0] * wc0, f[:, 0] * f[:, 1]], axis=1)
    return rows, cols, weights


def splat_features(points, features, grid: GridConfig) -> SplatResult:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    feats = np.asarray(features, dtype=float)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) != len(points):
        raise LengthMismatch(f"{len(feats)} features for {len(points)} points")
    if feats.shape[1] < 1:
        raise ValidationError("feature dimension must be >= 1")
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(feats))):
        raise ValidationError("non-finite splat input")
    H, W, Z = grid.cells_h, grid.cells_w, feats.shape[1]
    rows, cols, wts = bilinear_corners(grid.continuous(points[:, :2]))
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W) & (wts > 0)
    dropped = int((~inside.any(axis=1)).sum())
    pidx = np.broadcast_to(np.arange(len(points))[:, None], rows.shape)[inside]
    flat = (rows * W + cols)[inside]
    w = wts[inside]
    # bincount sums in index order, so results do not depend on thread scheduling
    wsum = np.bincount(flat, weights=w, minlength=H * W)
    fsum = np.stack([np.bincount(flat, weights=w * feats[pidx, z], minlength=H * W) for z in range(Z)], axis=1)
    valid = wsum > 0
    out = np.zeros((H * W, Z))
    out[valid] = fsum[valid] / wsum[valid, None]
    vplane = valid.reshape(H, W).astype(np.uint8)
    return SplatResult(
        BevGrid(grid, out.reshape(H, W, Z), vplane, "float"),
        BevGrid(grid, wsum.reshape(H, W), vplane.copy(), "float"),
        dropped,
    )
