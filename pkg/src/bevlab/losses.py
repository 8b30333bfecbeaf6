"""Reference loss functions over plain arrays, with analytic gradients where useful.

Everything here is float64 numpy and meant as ground truth for a trainer,
not as a training-speed implementation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import DegenerateBatch, DimensionMismatch, EmptyCorrespondence, EmptyMask, NonFiniteLoss, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: tuple = (1.0, 1.0, 1.0)
    beta: tuple = (1.0, 1.0, 1.0)
    num_bins: int = 128

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if min(self.alpha) < 0 or min(self.beta) < 0:
            raise ValidationError("loss weights must be non-negative")


# -- supervised contrastive ---------------------------------------------------


def _supcon_setup(labels):
    labels = np.asarray(labels).reshape(-1)
    n = len(labels)
    if n < 2:
        raise DegenerateBatch("need at least two patches")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    anchors = npos > 0
    if not anchors.any():
        raise DegenerateBatch("no patch has a positive partner")
    return same, npos, anchors


def supcon_loss(z, labels, tau: float = 0.1, renormalize: bool = True) -> float:
    """Supervised contrastive loss over patch embeddings ``z`` (N, Z).

    Anchors whose label appears only once are left out of the outer mean.
    With ``renormalize`` rows whose norm is off by more than 1e-6 are
    projected back onto the unit sphere (with a warning).
    """
    z = np.asarray(z, dtype=float)
    if renormalize:
        norms = np.linalg.norm(z, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            log.warning("supcon features are not unit norm; renormalizing")
            z = z / np.maximum(norms, 1e-12)[:, None]
    same, npos, anchors = _supcon_setup(labels)
    s = z @ z.T / tau
    np.fill_diagonal(s, -np.inf)
    logp = s - logsumexp(s, axis=1, keepdims=True)
    per_anchor = -np.where(same, logp, 0.0).sum(axis=1)[anchors] / npos[anchors]
    return float(per_anchor.mean())


def supcon_grad(z, labels, tau: float = 0.1) -> np.ndarray:
    """Gradient of :func:`supcon_loss` (``renormalize=False``) with respect to ``z``."""
    z = np.asarray(z, dtype=float)
    same, npos, anchors = _supcon_setup(labels)
    n_anchor = anchors.sum()
    s = z @ z.T / tau
    np.fill_diagonal(s, -np.inf)
    p = softmax(s, axis=1)  # p[i, a], zero on the diagonal
    pos = np.where(same, 1.0 / np.maximum(npos, 1)[:, None], 0.0)
    # dL/ds[i, j] for anchor rows, zero for excluded rows
    G = np.where(anchors[:, None], p - pos, 0.0) / n_anchor
    return (G + G.T) @ z / tau


# -- regression terms ---------------------------------------------------------


def _mask_or_all(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DimensionMismatch(f"mask {mask.shape} vs {shape}")
    return mask


def elevation_l1(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"{pred.shape} vs {gt.shape}")
    m = _mask_or_all(mask, gt.shape)
    if not m.any():
        raise EmptyMask("no valid cells")
    return float(np.abs(pred - gt)[m].mean())


def elevation_l1_grad(pred, gt, mask=None) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    m = _mask_or_all(mask, pred.shape)
    return np.where(m, np.sign(pred - np.asarray(gt, dtype=float)), 0.0) / m.sum()


def cross_entropy(logits, target_bins) -> np.ndarray:
    """Per-pixel CE of integer targets under softmax(logits); logits (..., C)."""
    logits = np.asarray(logits, dtype=float)
    t = np.asarray(target_bins, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    return -np.take_along_axis(lp, t[..., None], axis=-1)[..., 0]


def depth_loss(pred_logits, pred_depth, gt_depth, gt_bins) -> float:
    """Mean over pixels with a nonzero bin of |d_pred - d| + CE(logits, bin)."""
    pred_depth = np.asarray(pred_depth, dtype=float)
    gt_depth = np.asarray(gt_depth, dtype=float)
    gt_bins = np.asarray(gt_bins)
    if pred_depth.shape != gt_depth.shape or gt_bins.shape != gt_depth.shape:
        raise DimensionMismatch("depth loss inputs disagree in shape")
    valid = gt_bins != 0
    if not valid.any():
        raise EmptyMask("no valid depth pixels")
    l1 = np.abs(pred_depth - gt_depth)[valid]
    ce = cross_entropy(np.asarray(pred_logits)[valid], gt_bins[valid])
    return float((l1 + ce).mean())


def depth_l1_grad(pred_depth, gt_depth, gt_bins) -> np.ndarray:
    valid = np.asarray(gt_bins) != 0
    diff = np.asarray(pred_depth, dtype=float) - np.asarray(gt_depth, dtype=float)
    return np.where(valid, np.sign(diff), 0.0) / valid.sum()


def depth_ce_grad(pred_logits, gt_bins) -> np.ndarray:
    logits = np.asarray(pred_logits, dtype=float)
    bins = np.asarray(gt_bins)
    valid = bins != 0
    g = softmax(logits, axis=-1)
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, bins[..., None], 1.0, axis=-1)
    return np.where(valid[..., None], g - onehot, 0.0) / valid.sum()


# -- pretraining terms --------------------------------------------------------


def multiview_loss(anchor_feats, other_feats, corr) -> float:
    """Mean squared L2 distance over (anchor pixel, other pixel) flat-index pairs."""
    corr = np.asarray(corr, dtype=np.int64).reshape(-1, 2)
    if len(corr) == 0:
        raise EmptyCorrespondence("no correspondences")
    a = np.asarray(anchor_feats, dtype=float)
    o = np.asarray(other_feats, dtype=float)
    a = a.reshape(-1, a.shape[-1])
    o = o.reshape(-1, o.shape[-1])
    if corr[:, 0].max() >= len(a) or corr[:, 1].max() >= len(o) or corr.min() < 0:
        raise ValidationError("correspondence index out of range")
    diff = a[corr[:, 0]] - o[corr[:, 1]]
    return float((diff**2).sum(axis=1).mean())


def foundation_loss(pred_feats, target_feats, mask=None) -> float:
    """Mean L2 distance to unit-norm foundation-model targets over masked pixels."""
    pred = np.asarray(pred_feats, dtype=float)
    tgt = np.asarray(target_feats, dtype=float)
    if pred.shape != tgt.shape:
        raise DimensionMismatch(f"{pred.shape} vs {tgt.shape}")
    m = _mask_or_all(mask, tgt.shape[:-1])
    if not m.any():
        raise EmptyMask("no masked pixels")
    if np.any(np.abs(np.linalg.norm(tgt[m], axis=-1) - 1.0) > 1e-6):
        raise ValidationError("foundation targets must be unit norm")
    return float(np.linalg.norm(pred[m] - tgt[m], axis=-1).mean())


def bev_correspondences(anchor_cells, other_cells) -> np.ndarray:
    """All (anchor pixel, other pixel) pairs whose flat BEV cell ids match; negative ids are ignored."""
    a = np.asarray(anchor_cells).reshape(-1)
    o = np.asarray(other_cells).reshape(-1)
    oi = np.flatnonzero(o >= 0)
    oi = oi[np.argsort(o[oi], kind="stable")]
    okeys = o[oi]
    ai = np.flatnonzero(a >= 0)
    lo = np.searchsorted(okeys, a[ai], "left")
    hi = np.searchsorted(okeys, a[ai], "right")
    cnt = hi - lo
    rep = np.repeat(ai, cnt)
    run = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(cnt.sum())
    return np.column_stack([rep, oi[run]]).astype(np.int64)


def combine_pretrain(mv: float, fdn: float, depth: float, alpha=(1.0, 1.0, 1.0)) -> float:
    return float(alpha[0] * mv + alpha[1] * fdn + alpha[2] * depth)


def combine_train(supcon: float, elev: float, depth: float, beta=(1.0, 1.0, 1.0)) -> float:
    return float(beta[0] * supcon + beta[1] * elev + beta[2] * depth)


# -- gradient oracle ----------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = np.asarray(x, dtype=float).copy()
    flat = x.reshape(-1)
    g = np.zeros(flat.shape)
    for i in range(len(flat)):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteLoss(f"loss not finite around coordinate {i}")
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(x.shape)
