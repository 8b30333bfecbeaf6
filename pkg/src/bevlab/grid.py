"""Metric BEV grid geometry and the grid container.

A grid is a rectangle of ``cells_h x cells_w`` square cells. Rows grow
backwards (away from the heading), columns grow to the right. ``origin`` is
the world (x, y) of the outer corner of cell (0, 0), i.e. the far-left
corner when looking along ``yaw``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, ParseError

# validity codes shared by partition planes and grid validity planes
OUTSIDE = 0
OBSERVED = 1
OCCLUDED = 2


@dataclass(frozen=True)
class GridConfig:
    cells_h: int = 256
    cells_w: int = 256
    resolution: float = 0.1
    origin: tuple = (0.0, 0.0)
    yaw: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells_h, self.cells_w)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.cells_h * self.resolution, self.cells_w * self.resolution)

    @property
    def ego_anchor(self) -> tuple[int, int]:
        return (self.cells_h - 1, self.cells_w // 2)

    @property
    def _axes(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        back = np.array([-c, -s])
        right = np.array([s, -c])
        return back, right

    @classmethod
    def ego(cls, pose, cells_h=256, cells_w=256, resolution=0.1) -> "GridConfig":
        """Grid looking along the pose heading with the ego at the middle of the near edge."""
        yaw = pose.yaw
        c, s = np.cos(yaw), np.sin(yaw)
        fwd = np.array([c, s])
        left = np.array([-s, c])
        xy = np.asarray(pose.translation[:2], dtype=float)
        origin = xy + fwd * cells_h * resolution + left * (cells_w / 2) * resolution
        return cls(cells_h, cells_w, resolution, (float(origin[0]), float(origin[1])), float(yaw))

    @classmethod
    def parse(cls, spec: str, **kw) -> "GridConfig":
        """Parse ``HxWxRES`` such as ``256x256x0.1``."""
        try:
            h, w, r = spec.lower().split("x")
            return cls(int(h), int(w), float(r), **kw)
        except ValueError as exc:
            raise ParseError(f"bad grid spec {spec!r}, expected HxWxRES") from exc

    def continuous(self, xy) -> np.ndarray:
        """(row, col) continuous coordinates; cell (r, c) spans [r, r+1) x [c, c+1)."""
        xy = np.asarray(xy, dtype=float)[..., :2]
        back, right = self._axes
        rel = xy - np.asarray(self.origin)
        return np.stack([rel @ back, rel @ right], axis=-1) / self.resolution

    def cell_of(self, xy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer (row, col) of the containing cell plus an in-grid mask."""
        g = np.floor(self.continuous(xy)).astype(np.int64)
        r, c = g[..., 0], g[..., 1]
        inside = (r >= 0) & (r < self.cells_h) & (c >= 0) & (c < self.cells_w)
        return r, c, inside

    def cell_centers(self) -> np.ndarray:
        """World (x, y) of every cell center, shape (H, W, 2)."""
        rr, cc = np.meshgrid(np.arange(self.cells_h) + 0.5, np.arange(self.cells_w) + 0.5, indexing="ij")
        return self.to_world(np.stack([rr, cc], axis=-1))

    def to_world(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=float)
        back, right = self._axes
        return np.asarray(self.origin) + (rc[..., :1] * back + rc[..., 1:2] * right) * self.resolution


@dataclass
class BevGrid:
    """Grid payload: ``data`` is (H, W) for labels/validity or (H, W, C) for real channels."""

    config: GridConfig
    data: np.ndarray
    valid: Optional[np.ndarray] = None
    kind: str = field(default="float")  # float | labels | validity

    def __post_init__(self):
        if self.data.shape[:2] != self.config.shape:
            raise DimensionMismatch(f"grid data {self.data.shape} does not match config {self.config.shape}")
        if self.valid is not None and self.valid.shape != self.config.shape:
            raise DimensionMismatch("validity plane shape mismatch")

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def mask(self) -> np.ndarray:
        """Boolean validity; labels grids treat 0 as invalid when no plane is attached."""
        if self.valid is not None:
            return self.valid > 0
        if self.kind == "labels":
            return self.data != 0
        return np.ones(self.config.shape, dtype=bool)
