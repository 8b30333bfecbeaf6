"""Lifting image instance masks into BEV grids and merging them across frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionMismatch, ValidationError
from .geometry import CameraModel
from .grid import GridConfig


def cell_majority(flat_cells: np.ndarray, labels: np.ndarray, ncells: int) -> np.ndarray:
    """Most frequent label per flat cell index (ties -> smallest label); 0 where no hits."""
    out = np.zeros(ncells, dtype=np.int64)
    if len(flat_cells) == 0:
        return out
    pairs, counts = np.unique(np.column_stack([flat_cells, labels]), axis=0, return_counts=True)
    # sort by cell, then count descending, then label ascending; first row per cell wins
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.ones(len(pairs), dtype=bool)
    first[1:] = pairs[1:, 0] != pairs[:-1, 0]
    out[pairs[first, 0]] = pairs[first, 1]
    return out


def lift_mask_to_bev(mask, depth, camera: CameraModel, grid: GridConfig, movable=None) -> np.ndarray:
    """Backproject labelled, valid-depth, non-movable pixels and vote per grid cell.

    ``camera`` carries the frame's world->camera extrinsics.
    """
    mask = np.asarray(mask)
    depth = np.asarray(depth, dtype=float)
    if mask.shape != camera.shape or depth.shape != camera.shape:
        raise DimensionMismatch(f"mask {mask.shape}, depth {depth.shape}, camera {camera.shape}")
    use = (mask > 0) & (depth > 0)
    if movable is not None:
        movable = np.asarray(movable)
        if movable.shape != camera.shape:
            raise DimensionMismatch("movable mask shape mismatch")
        use &= movable == 0
    v, u = np.nonzero(use)
    pts = camera.backproject_points(np.column_stack([u, v]), depth[v, u])
    r, c, inside = grid.cell_of(pts[:, :2])
    flat = r[inside] * grid.cells_w + c[inside]
    votes = cell_majority(flat, mask[v, u][inside].astype(np.int64), grid.cells_h * grid.cells_w)
    return votes.reshape(grid.shape)


def igmm_merge(m1, m2, max_label: Optional[int] = None) -> tuple[np.ndarray, dict, int]:
    """Greedy one-to-one relabeling of ``m2`` into the label space of anchor ``m1``.

    Labels of ``m2`` are visited in ascending order. Each takes the ``m1``
    label it overlaps most among those not already taken (ties -> smallest);
    labels with no such overlap get a fresh id above the running maximum.
    The merged grid keeps ``m1`` wherever it is nonzero.

    Returns ``(merged, label_map, max_label)``.
    """
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.shape != m2.shape:
        raise DimensionMismatch(f"{m1.shape} vs {m2.shape}")
    if max_label is None:
        max_label = int(m1.max()) if m1.size else 0
    both = (m1 != 0) & (m2 != 0)
    pairs, counts = np.unique(np.column_stack([m2[both], m1[both]]), axis=0, return_counts=True)
    overlaps: dict[int, list[tuple[int, int]]] = {}
    for (l2, l1), n in zip(pairs.tolist(), counts.tolist()):
        overlaps.setdefault(l2, []).append((l1, n))
    taken: set[int] = set()
    label_map: dict[int, int] = {}
    for l2 in np.unique(m2[m2 != 0]).tolist():
        cands = [(-n, l1) for l1, n in overlaps.get(l2, []) if l1 not in taken]
        if cands:
            target = min(cands)[1]
            taken.add(target)
        else:
            max_label += 1
            target = max_label
        label_map[l2] = target
    relabeled = np.zeros_like(m1)
    if label_map:
        keys = np.array(sorted(label_map))
        vals = np.array([label_map[k] for k in keys])
        nz = m2 != 0
        relabeled[nz] = vals[np.searchsorted(keys, m2[nz])]
    merged = np.where(m1 != 0, m1, relabeled)
    return merged, label_map, max_label


@dataclass
class BevFrame:
    mask: np.ndarray
    depth: np.ndarray
    camera: CameraModel
    movable: Optional[np.ndarray] = None


def accumulate_bev_masks(frames: Iterable[BevFrame], grid: GridConfig) -> np.ndarray:
    """Lift the first frame as the anchor, then IGMM-merge every later frame into it, in order."""
    acc = None
    max_label = 0
    for fr in frames:
        lifted = lift_mask_to_bev(fr.mask, fr.depth, fr.camera, grid, fr.movable)
        if acc is None:
            acc = lifted
            max_label = int(acc.max())
            continue
        acc, _, max_label = igmm_merge(acc, lifted, max_label)
    if acc is None:
        raise ValidationError("accumulate_bev_masks needs at least one frame")
    return acc
