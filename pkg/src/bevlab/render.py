"""RGB renderings of BEV grids for eyeballing results. Invalid cells are white."""
from __future__ import annotations

import warnings

import numpy as np

from .bev_truth import ELEV_MAX, ELEV_MIN
from .errors import RankDeficientWarning, ValidationError
from .evaluation import pca_fit, pca_transform
from .grid import BevGrid

WHITE = np.array([255, 255, 255], dtype=np.uint8)

PALETTE = np.array([
    [0, 0, 0], [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
    [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207], [57, 59, 121],
    [99, 121, 57], [140, 109, 49], [132, 60, 57], [123, 65, 115], [82, 84, 163], [181, 207, 107],
    [231, 186, 82], [214, 97, 107],
], dtype=np.uint8)

# piecewise-linear dark blue -> teal -> yellow
_ELEV_STOPS = np.array([[0.0, 20, 30, 110], [0.5, 30, 160, 150], [1.0, 250, 230, 40]])


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.where(labels > 0, (labels - 1) % (len(PALETTE) - 1) + 1, 0)
    return PALETTE[idx]


def elevation_colors(z, lo: float = ELEV_MIN, hi: float = ELEV_MAX) -> np.ndarray:
    t = np.clip((np.asarray(z, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    rgb = [np.interp(t, _ELEV_STOPS[:, 0], _ELEV_STOPS[:, k]) for k in (1, 2, 3)]
    return np.round(np.stack(rgb, -1)).astype(np.uint8)


def feature_colors(feats, valid) -> np.ndarray:
    """First three principal components of the valid cells, each stretched to 0..255."""
    H, W = valid.shape
    out = np.zeros((H, W, 3), dtype=np.uint8)
    x = feats.reshape(H * W, -1)[valid.reshape(-1)]
    if len(x) == 0:
        return out
    dim = min(3, x.shape[1])
    if len(x) > dim:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            model = pca_fit(x, dim)
        y = pca_transform(model, x)
    else:
        y = x[:, :dim] - x[:, :dim].mean(axis=0)
    y = np.pad(y, ((0, 0), (0, 3 - y.shape[1])))
    lo, hi = y.min(axis=0), y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out.reshape(H * W, 3)[valid.reshape(-1)] = np.round((y - lo) / span * 255).astype(np.uint8)
    return out


def render_grid_ppm(grid: BevGrid, mode: str = "labels") -> np.ndarray:
    """(H, W, 3) uint8 image of ``grid``; write with :func:`bevlab.io.write_ppm`."""
    valid = grid.mask
    data = grid.data
    if mode == "labels":
        rgb = label_colors(data if data.ndim == 2 else data[..., 0])
    elif mode == "elevation":
        rgb = elevation_colors(data if data.ndim == 2 else data[..., 0])
    elif mode == "feature-pca":
        feats = data if data.ndim == 3 else data[..., None]
        rgb = feature_colors(feats.astype(float), valid)
    else:
        raise ValidationError(f"unknown render mode {mode!r}")
    rgb = rgb.copy()
    rgb[~valid] = WHITE
    return rgb
