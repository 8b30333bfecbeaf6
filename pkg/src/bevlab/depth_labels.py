"""Pseudo ground-truth depth: stereo-vetted accumulated LiDAR plus IDW infilling."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionMismatch, ValidationError
from .geometry import CameraModel, PointCloud, Pose, accumulate_clouds, project_cloud, render_depth

log = logging.getLogger(__name__)

# scanline directions (dx, dy); the first four are the usual 4-path subset
PATHS = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]


@dataclass(frozen=True)
class SgmConfig:
    block_radius: int = 2
    max_disparity: int = 48
    num_paths: int = 8
    P1: float = 4.0
    P2: float = 32.0
    uniqueness: float = 0.05
    lr_tolerance: float = 1.0
    texture_threshold: float = 1.0
    jobs: int = 1


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray

    def as_image(self) -> np.ndarray:
        """Serialisable form where 0 marks invalid (zero disparity is dropped)."""
        return np.where(self.valid, self.values, 0.0)

    @classmethod
    def from_image(cls, img) -> "DisparityMap":
        img = np.asarray(img, dtype=float)
        return cls(img, img > 0)


def _block_costs(left, right, cfg: SgmConfig) -> np.ndarray:
    """Mean absolute difference over a square block, shape (H, W, D)."""
    h, w = left.shape
    D = cfg.max_disparity + 1
    size = 2 * cfg.block_radius + 1
    cost = np.empty((h, w, D), dtype=np.float32)
    big = np.float32(255.0)
    for d in range(D):
        diff = np.full((h, w), big, dtype=np.float32)
        diff[:, d:] = np.abs(left[:, d:] - right[:, : w - d])
        cost[:, :, d] = uniform_filter(diff, size=size, mode="nearest")
    return cost


def _aggregate_path(cost: np.ndarray, dx: int, dy: int, P1: float, P2: float) -> np.ndarray:
    if dx == 0:
        # walk rows instead of columns
        return _aggregate_path(cost.transpose(1, 0, 2), dy, 0, P1, P2).transpose(1, 0, 2)
    h, w, D = cost.shape
    L = np.empty_like(cost)
    cols = range(w) if dx > 0 else range(w - 1, -1, -1)
    first = True
    P1 = np.float32(P1)
    P2 = np.float32(P2)
    for x in cols:
        c = cost[:, x, :]
        if first:
            L[:, x, :] = c
            first = False
            continue
        prev = L[:, x - dx, :]
        if dy:
            shifted = np.empty_like(prev)
            if dy > 0:
                shifted[dy:] = prev[:-dy]
                start = slice(0, dy)
            else:
                shifted[:dy] = prev[-dy:]
                start = slice(h + dy, h)
            prev = shifted
        m = prev.min(axis=1, keepdims=True)
        best = np.minimum(prev, m + P2)
        best[:, 1:] = np.minimum(best[:, 1:], prev[:, :-1] + P1)
        best[:, :-1] = np.minimum(best[:, :-1], prev[:, 1:] + P1)
        out = c + best - m
        if dy:
            out[start] = c[start]
        L[:, x, :] = out
    return L


def _subpixel(S: np.ndarray, d: np.ndarray) -> np.ndarray:
    D = S.shape[2]
    dc = np.clip(d, 1, D - 2)
    take = lambda k: np.take_along_axis(S, k[..., None], axis=2)[..., 0]
    c0, c1, c2 = take(dc - 1), take(dc), take(dc + 1)
    denom = c0 - 2 * c1 + c2
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, 0.5 * (c0 - c2) / denom, 0.0)
    off = np.where((d >= 1) & (d <= D - 2), np.clip(off, -0.5, 0.5), 0.0)
    return d + off


def stereo_disparity(left, right, cfg: SgmConfig = SgmConfig()) -> DisparityMap:
    """SAD block matching with semi-global aggregation and a left-right check.

    Pixels are invalid when the left block's intensity standard deviation is
    below ``texture_threshold``, when the best aggregated cost is not
    distinctly lower than every candidate more than one disparity away
    (``uniqueness``), or when left and right disparities disagree by more
    than ``lr_tolerance``.
    """
    left = np.asarray(left, dtype=np.float32)
    right = np.asarray(right, dtype=np.float32)
    if left.shape != right.shape or left.ndim != 2:
        raise DimensionMismatch(f"stereo pair shapes {left.shape} vs {right.shape}")
    if not 1 <= cfg.num_paths <= 8:
        raise ValidationError("num_paths must be in 1..8")
    h, w = left.shape
    cost = _block_costs(left, right, cfg)
    paths = PATHS[: cfg.num_paths]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            parts = list(pool.map(lambda p: _aggregate_path(cost, p[0], p[1], cfg.P1, cfg.P2), paths))
    else:
        parts = [_aggregate_path(cost, dx, dy, cfg.P1, cfg.P2) for dx, dy in paths]
    S = parts[0].copy()
    for part in parts[1:]:
        S += part
    D = S.shape[2]
    xs = np.arange(w)
    # right-image disparities: S_R(x, d) = S(x + d, d)
    d_idx = np.arange(D)
    src = xs[:, None] + d_idx[None, :]
    src_ok = src < w
    SR = np.full_like(S, np.inf)
    SR[:, src_ok] = S[:, np.minimum(src, w - 1), d_idx[None, :]][:, src_ok]
    dL = S.argmin(axis=2)
    dR = SR.argmin(axis=2)

    best = np.take_along_axis(S, dL[..., None], axis=2)[..., 0]
    far = np.abs(d_idx[None, None, :] - dL[..., None]) > 1
    runner = np.where(far, S, np.inf).min(axis=2)
    unique = best < runner * (1.0 - cfg.uniqueness)

    match_x = xs[None, :] - dL
    in_img = match_x >= 0
    dR_at = np.take_along_axis(dR, np.clip(match_x, 0, w - 1), axis=1)
    consistent = in_img & (np.abs(dL - dR_at) <= cfg.lr_tolerance)
    size = 2 * cfg.block_radius + 1
    mean = uniform_filter(left, size=size, mode="nearest")
    var = uniform_filter(left * left, size=size, mode="nearest") - mean * mean
    textured = np.sqrt(np.maximum(var, 0.0)) >= cfg.texture_threshold
    valid = textured & unique & consistent
    disp = _subpixel(S, dL).astype(float)
    return DisparityMap(np.where(valid, disp, 0.0), valid)


def disparity_to_depth(disp: DisparityMap, baseline: float, fx: float) -> np.ndarray:
    if baseline <= 0 or fx <= 0:
        raise ValidationError("baseline and fx must be positive")
    ok = disp.valid & (disp.values > 0)
    depth = np.zeros(disp.values.shape)
    depth[ok] = fx * baseline / disp.values[ok]
    return depth


def consistency_filter(lidar, stereo, rel_threshold: float = 0.30) -> np.ndarray:
    """Drop LiDAR depths whose error relative to a valid stereo depth exceeds the threshold."""
    lidar = np.asarray(lidar, dtype=float)
    stereo = np.asarray(stereo, dtype=float)
    if lidar.shape != stereo.shape:
        raise DimensionMismatch(f"{lidar.shape} vs {stereo.shape}")
    if not 0 < rel_threshold <= 1:
        raise ValidationError("rel_threshold must be in (0, 1]")
    has_stereo = stereo > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(lidar - stereo) / stereo
    keep = (lidar > 0) & (~has_stereo | (rel <= rel_threshold))
    return np.where(keep, lidar, 0.0)


def idw_infill(sparse, window_radius: int = 4, power: float = 2.0, guide=None, edge_sigma: float = 10.0) -> np.ndarray:
    """Fill invalid pixels with an inverse-distance weighted mean of valid window neighbours.

    With a guide image each weight is further multiplied by a Gaussian of the
    intensity difference to the centre pixel. Valid pixels are left as is.
    """
    sparse = np.asarray(sparse, dtype=float)
    if window_radius < 1 or power <= 0:
        raise ValidationError("window_radius >= 1 and power > 0 required")
    r = window_radius
    h, w = sparse.shape
    valid = sparse > 0
    pad_d = np.pad(sparse, r)
    pad_v = np.pad(valid, r)
    if guide is not None:
        guide = np.asarray(guide, dtype=float)
        if guide.shape != sparse.shape:
            raise DimensionMismatch("guide image shape mismatch")
        pad_g = np.pad(guide, r, mode="edge")
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            wt = np.hypot(dx, dy) ** -power
            sl = (slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
            nv = pad_v[sl]
            wk = np.where(nv, wt, 0.0)
            if guide is not None:
                diff = pad_g[sl] - guide
                wk = wk * np.exp(-(diff**2) / (2.0 * edge_sigma**2))
            num += wk * pad_d[sl]
            den += wk
    out = sparse.copy()
    fill = ~valid & (den > 0)
    out[fill] = num[fill] / den[fill]
    return out


def bin_depth(depth, num_bins: int = 128, d_min: float = 0.5, d_max: float = 51.2) -> np.ndarray:
    """Bin 0 is invalid; valid depths map uniformly onto 1..C-1."""
    if num_bins < 2 or not d_min < d_max:
        raise ValidationError("need num_bins >= 2 and d_min < d_max")
    depth = np.asarray(depth, dtype=float)
    valid = depth > 0
    frac = (np.clip(depth, d_min, d_max) - d_min) / (d_max - d_min)
    bins = 1 + np.floor(frac * (num_bins - 1)).astype(np.int64)
    bins = np.minimum(bins, num_bins - 1)
    return np.where(valid, bins, 0)


@dataclass(frozen=True)
class DepthLabelConfig:
    rel_threshold: float = 0.30
    idw_radius: int = 4
    idw_power: float = 2.0
    edge_sigma: Optional[float] = None
    d_max: float = 51.2
    sgm: SgmConfig = field(default_factory=SgmConfig)


@dataclass
class DepthLabel:
    depth: np.ndarray
    accumulated: np.ndarray
    filtered: np.ndarray
    stereo: np.ndarray
    density_before: float
    density_after: float

    @property
    def report(self) -> dict:
        return {
            "density_accumulated": float((self.accumulated > 0).mean()),
            "density_before_infill": self.density_before,
            "density_after_infill": self.density_after,
            "removed_by_stereo": int(((self.accumulated > 0) & (self.filtered == 0)).sum()),
        }


def make_depth_label(
    scans: Sequence[PointCloud],
    poses: Sequence[Pose],
    camera: CameraModel,
    stereo_pair=None,
    baseline: Optional[float] = None,
    cfg: DepthLabelConfig = DepthLabelConfig(),
    disparity: Optional[DisparityMap] = None,
    stereo_depth=None,
    guide=None,
) -> DepthLabel:
    """Accumulate scans, z-buffer into the camera, veto with stereo, then infill.

    Stereo evidence comes from exactly one of ``stereo_pair`` (left, right),
    ``disparity`` or ``stereo_depth``; the first two need ``baseline``.
    """
    if not scans:
        raise ValidationError("make_depth_label needs at least one scan")
    cloud = accumulate_clouds(scans, poses)
    acc = render_depth(project_cloud(cloud, camera), camera)
    acc[acc > cfg.d_max] = 0.0
    if stereo_depth is None:
        if disparity is None:
            if stereo_pair is None:
                raise ValidationError("no stereo evidence given")
            disparity = stereo_disparity(stereo_pair[0], stereo_pair[1], cfg.sgm)
            if guide is None and cfg.edge_sigma is not None:
                guide = stereo_pair[0]
        if baseline is None:
            raise ValidationError("baseline required to convert disparity")
        stereo_depth = disparity_to_depth(disparity, baseline, camera.fx)
    stereo_depth = np.asarray(stereo_depth, dtype=float)
    if stereo_depth.shape != camera.shape:
        raise DimensionMismatch("stereo depth does not match camera")
    filtered = consistency_filter(acc, stereo_depth, cfg.rel_threshold)
    use_guide = guide if cfg.edge_sigma is not None else None
    out = idw_infill(filtered, cfg.idw_radius, cfg.idw_power, use_guide, cfg.edge_sigma or 1.0)
    before = float((filtered > 0).mean())
    after = float((out > 0).mean())
    log.debug("depth label density %.3f -> %.3f", before, after)
    return DepthLabel(out, acc, filtered, stereo_depth, before, after)
