"""Supervised metrics and the unsupervised (cluster, match, score) protocol."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyRegion, RankDeficientWarning, ValidationError
from .geometry import CameraModel
from .grid import OBSERVED, OCCLUDED, BevGrid, GridConfig

REGIONS = {"unoccluded": (OBSERVED,), "occluded": (OCCLUDED,), "both": (OBSERVED, OCCLUDED)}


def region_mask(partition, region: str) -> np.ndarray:
    if region not in REGIONS:
        raise ValidationError(f"unknown region {region!r}")
    return np.isin(np.asarray(partition), REGIONS[region])


def confusion_matrix(pred, gt, select, num_classes: Optional[int] = None) -> np.ndarray:
    """Counts with rows = ground truth, cols = prediction, over selected cells."""
    p = np.asarray(pred).reshape(-1)[np.asarray(select).reshape(-1)]
    g = np.asarray(gt).reshape(-1)[np.asarray(select).reshape(-1)]
    if num_classes is None:
        num_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    p = np.clip(p, 0, num_classes - 1)
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class IouReport:
    per_class: dict
    miou: float
    cells: int
    confusion: np.ndarray = field(repr=False)


def iou_from_confusion(cm: np.ndarray) -> IouReport:
    """Class 0 is 'invalid': it never counts as a class, but predicting it is still a miss."""
    tp = np.diag(cm).astype(float)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    per_class = {}
    for c in range(1, len(cm)):
        if cm[c].sum() == 0:
            continue  # averaged only over classes present in ground truth
        per_class[c] = tp[c] / (tp[c] + fp[c] + fn[c])
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return IouReport(per_class, miou, int(cm[1:].sum()), cm)


def iou(pred, gt, region: str = "both", partition=None, num_classes: Optional[int] = None) -> IouReport:
    """Per-class IoU and mIoU over cells of ``region`` where the ground truth is labelled (nonzero)."""
    pred = np.asarray(pred.data if isinstance(pred, BevGrid) else pred)
    gt = np.asarray(gt.data if isinstance(gt, BevGrid) else gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"{pred.shape} vs {gt.shape}")
    select = gt > 0
    if partition is not None:
        part = partition.data if isinstance(partition, BevGrid) else partition
        if np.shape(part) != gt.shape:
            raise DimensionMismatch("partition shape mismatch")
        select &= region_mask(part, region)
    if not select.any():
        raise EmptyRegion(f"no labelled cells in region {region!r}")
    return iou_from_confusion(confusion_matrix(pred, gt, select, num_classes))


def mae(pred, gt, region: str = "both", partition=None, valid=None) -> float:
    pred_v = np.asarray(pred.data if isinstance(pred, BevGrid) else pred, dtype=float)
    gt_v = np.asarray(gt.data if isinstance(gt, BevGrid) else gt, dtype=float)
    if pred_v.shape != gt_v.shape:
        raise DimensionMismatch(f"{pred_v.shape} vs {gt_v.shape}")
    select = np.ones(gt_v.shape, dtype=bool)
    if valid is not None:
        select &= np.asarray(valid, dtype=bool)
    for g in (pred, gt):
        if isinstance(g, BevGrid):
            select &= g.mask
    if partition is not None:
        part = partition.data if isinstance(partition, BevGrid) else partition
        select &= region_mask(part, region)
    if not select.any():
        raise EmptyRegion(f"no valid cells in region {region!r}")
    return float(np.abs(pred_v - gt_v)[select].mean())


# -- PCA ----------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, D), rows are eigenvectors
    eigenvalues: np.ndarray
    total_variance: float = 0.0

    @property
    def explained_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance) if self.total_variance > 0 else 1.0


def pca_fit(features, out_dim: int = 64, rank_tol: float = 1e-10) -> PcaModel:
    x = np.asarray(features, dtype=float)
    n, D = x.shape
    if out_dim > D or n <= out_dim:
        raise ValidationError(f"need N > out_dim and D >= out_dim (N={n}, D={D}, out_dim={out_dim})")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    nonzero = int((vals > rank_tol * max(vals[0], 1e-300)).sum())
    k = out_dim
    if nonzero < out_dim:
        warnings.warn(f"only {nonzero} nonzero eigenvalues; returning {nonzero} components", RankDeficientWarning)
        k = nonzero
    comps = vecs[:, :k].T.copy()
    # sign convention: largest-magnitude coordinate of each component is positive
    pivot = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= signs[:, None]
    return PcaModel(mean, comps, vals[:k].clip(min=0), float(vals.clip(min=0).sum()))


def pca_transform(model: PcaModel, features) -> np.ndarray:
    return (np.asarray(features, dtype=float) - model.mean) @ model.components.T


# -- k-means ------------------------------------------------------------------


@dataclass
class ClusterModel:
    centroids: np.ndarray
    objective_history: list
    iterations: int
    mapping: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return self.iterations > 0

    def predict(self, features) -> np.ndarray:
        return _sqdist(np.asarray(features, dtype=float), self.centroids).argmin(axis=1)


def _sqdist(x, c, chunk: int = 2048):
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion, so ties and zeros are exact
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        out[s : s + chunk] = ((x[s : s + chunk, None, :] - c[None, :, :]) ** 2).sum(-1)
    return out


def _kmeans_pp(x, k, rng, trials: int = 0):
    """Greedy k-means++ seeding: each step draws ``trials`` D^2-weighted candidates and keeps the one
    that lowers the total squared distance most (``trials`` 0 means 2 + floor(ln k))."""
    n = len(x)
    trials = trials or 2 + int(np.log(k))
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        best_i, best_d2, best_pot = -1, None, np.inf
        for i in cand:
            nd2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
            pot = nd2.sum()
            if pot < best_pot:
                best_i, best_d2, best_pot = int(i), nd2, pot
        centers.append(x[best_i])
        d2 = best_d2
    return np.array(centers)


def kmeans(features, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6,
           n_init: int = 1) -> tuple[ClusterModel, np.ndarray]:
    """k-means++ seeding then Lloyd iterations; empty clusters move to the farthest point.

    With ``n_init`` > 1 the whole procedure is restarted from fresh seedings
    drawn from one seeded stream, and the run with the lowest final objective
    (earliest on ties) is returned.
    """
    x = np.asarray(features, dtype=float)
    n = len(x)
    if k < 1 or n < k:
        raise ValidationError(f"need 1 <= k <= N (k={k}, N={n})")
    if n_init < 1:
        raise ValidationError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, _kmeans_pp(x, k, rng), max_iters, tol)
        if best is None or run[0].objective_history[-1] < best[0].objective_history[-1]:
            best = run
    return best


def _lloyd(x, c, max_iters, tol):
    n, k = len(x), len(c)
    history: list[float] = []
    it = 0
    prev_c = c
    for it in range(1, max_iters + 1):
        d = _sqdist(x, c)
        assign = d.argmin(axis=1)
        dmin = d[np.arange(n), assign]
        obj = float(dmin.sum())
        if history and obj > history[-1]:
            # only float rounding in the mean update can get here; keep the better centroids
            c = prev_c
            break
        history.append(obj)
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(c)
        for dim in range(x.shape[1]):
            new[:, dim] = np.bincount(assign, weights=x[:, dim], minlength=k)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken: set[int] = set()
        for j in np.flatnonzero(~nonempty):
            far = next(i for i in np.argsort(-dmin, kind="stable") if i not in taken)
            taken.add(far)
            new[j] = x[far]
        shift = float(np.sqrt(((new - c) ** 2).sum(1)).max())
        prev_c, c = c, new
        if shift < tol:
            break
    d = _sqdist(x, c)
    assign = d.argmin(axis=1)
    final = float(d[np.arange(n), assign].sum())
    if final > history[-1]:
        c = prev_c
        d = _sqdist(x, c)
        assign = d.argmin(axis=1)
        final = float(d[np.arange(n), assign].sum())
    history.append(final)
    return ClusterModel(c, history, it), assign


# -- assignment ---------------------------------------------------------------


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of min(n, m) pairs (shortest augmenting paths)."""
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValidationError("cost must be a matrix")
    if not np.all(np.isfinite(C)):
        raise ValidationError("costs must be finite")
    n, m = C.shape
    if n == 0 or m == 0:
        return [], 0.0
    transposed = n > m
    if transposed:
        C = C.T
        n, m = m, n
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(cand.argmin()) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    pairs.sort()
    total = float(sum(np.asarray(cost, dtype=float)[r, c] for r, c in pairs))
    return pairs, total


# -- unsupervised protocol ----------------------------------------------------

OTHER = -1


@dataclass
class UnsupReport:
    iou: IouReport
    mapping: dict
    cluster_model: ClusterModel
    pca: Optional[PcaModel] = None


def unsup_ssc_eval(val_feats, val_labels, test_feats, test_labels, k: int, seed: int,
                   pca_dim: Optional[int] = None, max_iters: int = 100, n_init: int = 10) -> UnsupReport:
    """Cluster validation features, match clusters to classes on the test split, score IoU.

    Features are (N, Z) rows over labelled cells; labels are positive class
    ids. Clusters left unmatched map to :data:`OTHER`, which never scores.
    """
    vf = np.asarray(val_feats, dtype=float)
    tf = np.asarray(test_feats, dtype=float)
    tl = np.asarray(test_labels).reshape(-1)
    if len(tf) != len(tl):
        raise DimensionMismatch("test features and labels disagree in length")
    pca = None
    if pca_dim is not None and pca_dim < vf.shape[1]:
        pca = pca_fit(vf, pca_dim)
        vf, tf = pca_transform(pca, vf), pca_transform(pca, tf)
    model, _ = kmeans(vf, k, seed, max_iters, n_init=n_init)
    clusters = model.predict(tf)
    classes = np.unique(tl[tl > 0])
    if len(classes) > k:
        raise ValidationError(f"k={k} is smaller than the {len(classes)} test classes")
    overlap = np.zeros((k, len(classes)))
    sel = tl > 0
    np.add.at(overlap, (clusters[sel], np.searchsorted(classes, tl[sel])), 1)
    pairs, _ = hungarian(-overlap)
    mapping = {cl: OTHER for cl in range(k)}
    for r, c in pairs:
        mapping[r] = int(classes[c])
    model.mapping = mapping
    lut = np.array([mapping[c] for c in range(k)])
    pred = lut[clusters]
    pred = np.where(pred == OTHER, 0, pred)
    ncls = int(max(tl.max(initial=0), pred.max(initial=0))) + 1
    cm = confusion_matrix(pred, tl, sel, ncls)
    return UnsupReport(iou_from_confusion(cm), mapping, model, pca)


def build_foundation_bev(pixel_feats, depth, camera: CameraModel, grid: GridConfig) -> BevGrid:
    """Backproject per-pixel features and max-pool them componentwise per cell."""
    feats = np.asarray(pixel_feats, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if feats.shape[:2] != camera.shape or depth.shape != camera.shape:
        raise DimensionMismatch("features/depth do not match the camera")
    v, u = np.nonzero(depth > 0)
    pts = camera.backproject_points(np.column_stack([u, v]), depth[v, u])
    r, c, inside = grid.cell_of(pts[:, :2])
    flat = (r * grid.cells_w + c)[inside]
    f = feats[v, u][inside]
    Z = feats.shape[2]
    out = np.full((grid.cells_h * grid.cells_w, Z), -np.inf)
    np.maximum.at(out, flat, f)
    valid = np.isfinite(out[:, 0])
    out[~valid] = 0.0
    return BevGrid(grid, out.reshape(grid.cells_h, grid.cells_w, Z), valid.reshape(grid.shape).astype(np.uint8), "float")
