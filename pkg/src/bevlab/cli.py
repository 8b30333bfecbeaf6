"""``bevlab`` command line: data generation, label construction, metrics and rendering.

Exit codes: 0 ok, 2 validation failure, 3 I/O or format failure, 4 numeric failure.
Set ``BEVLAB_LOG`` to error|warn|info|debug to control logging on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import losses
from .bev_truth import build_elevation_map, build_semantic_map, observation_partition
from .dataset import DatasetConfig, write_synth_dataset
from .depth_labels import DepthLabelConfig, DisparityMap, SgmConfig, make_depth_label
from .dynamics import VoxelMap, build_static_map, classify_dynamic, render_movable_mask
from .errors import BevlabError, EmptyRegion, FormatError, NumericError, ValidationError
from .evaluation import iou, mae, unsup_ssc_eval
from .geometry import PointCloud, mounted_camera, transform_cloud
from .grid import BevGrid, GridConfig
from .io import (
    atomic_write, depth_to_pgm, pgm_to_depth, pgm_to_disparity, read_bevg, read_camera, read_pcb, read_pgm,
    read_poses, write_bevg, write_pcb, write_pgm, write_ppm,
)
from .manifest import load_manifest, mount_from_keys, require_valid
from .mask_bev import BevFrame, accumulate_bev_masks
from .render import render_grid_ppm
from .splat import splat_features
from .synth import SceneConfig

log = logging.getLogger("bevlab")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO,
           "debug": logging.DEBUG}


# -- helpers ------------------------------------------------------------------


def _write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _check_finite(name, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")


def _grid_dims(text: str) -> GridConfig:
    return GridConfig.parse(text)


def _elev_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ValidationError(f"bad elevation range {text!r}, expected LO:HI") from exc
    if not lo < hi:
        raise ValidationError("elevation range must have LO < HI")
    return lo, hi


def _load_sequence(scans_dir, poses_file):
    """Sorted scan files with their poses; scans are taken to be in the sensor frame."""
    files = sorted(Path(scans_dir).glob("*.pcb"))
    if not files:
        raise ValidationError(f"no .pcb scans in {scans_dir}")
    poses = read_poses(poses_file)
    if len(poses) != len(files):
        raise ValidationError(f"{len(files)} scans but {len(poses)} poses")
    scans = [read_pcb(f, frame="sensor") for f in files]
    return scans, poses


def _window(n: int, frame, window: int) -> tuple[int, range]:
    f = n - 1 if frame is None else frame
    if not 0 <= f < n:
        raise ValidationError(f"frame {f} outside 0..{n - 1}")
    if window < 1:
        raise ValidationError("window must be >= 1")
    return f, range(max(0, f - window + 1), f + 1)


def _camera_at(camera_file, pose=None):
    """World->camera model, mounting the camera on ``pose`` when the file carries a mount."""
    cam, extra = read_camera(camera_file)
    mount = mount_from_keys(extra)
    if mount is not None:
        if pose is None:
            raise ValidationError("camera file has a mount; a sensor pose is needed")
        cam = mounted_camera(cam, mount, pose)
    return cam, extra


def _ego_grid(dims: GridConfig, pose) -> GridConfig:
    return GridConfig.ego(pose, dims.cells_h, dims.cells_w, dims.resolution)


# -- subcommands ----------------------------------------------------------------


def cmd_synth(a) -> int:
    scene = SceneConfig(num_regions=a.regions, num_dynamic=a.dynamic, split_instances=a.split_instances)
    cfg = DatasetConfig(frames=a.frames, grid=a.grid, feature_dim=a.feature_dim, feature_sigma=a.feature_sigma,
                        shuffle_instances=a.shuffle_instances, scene=scene)
    m = write_synth_dataset(a.out, a.seed, cfg, jobs=a.jobs)
    require_valid(m)
    return 0


def cmd_depth_gt(a) -> int:
    scans, poses = _load_sequence(a.scans, a.poses)
    f, win = _window(len(scans), a.frame, a.window)
    cam, extra = _camera_at(a.camera, poses[f])
    baseline = a.baseline if a.baseline is not None else (float(extra["baseline"]) if "baseline" in extra else None)
    cfg = DepthLabelConfig(rel_threshold=a.rel_threshold, idw_radius=a.idw_radius, idw_power=a.idw_power,
                           edge_sigma=a.edge_sigma, sgm=SgmConfig(max_disparity=a.max_disparity, jobs=a.jobs))
    kw = {}
    if a.disparity:
        if a.stereo_left or a.stereo_right:
            raise ValidationError("give either --disparity or a stereo pair, not both")
        kw["disparity"] = DisparityMap.from_image(pgm_to_disparity(read_pgm(a.disparity)))
    elif a.stereo_left and a.stereo_right:
        kw["stereo_pair"] = (read_pgm(a.stereo_left).astype(float), read_pgm(a.stereo_right).astype(float))
    else:
        raise ValidationError("stereo evidence required: --stereo-left/--stereo-right or --disparity")
    lab = make_depth_label([scans[i] for i in win], [poses[i] for i in win], cam, baseline=baseline, cfg=cfg, **kw)
    _check_finite("depth label", lab.depth)
    write_pgm(a.out, depth_to_pgm(lab.depth))
    if a.report:
        _write_json(a.report, {"frame": f, "scans": len(win), **lab.report})
    return 0


def cmd_static_map(a) -> int:
    scans, poses = _load_sequence(a.scans, a.poses)
    world = [transform_cloud(s, p) for s, p in zip(scans, poses)]
    vm = build_static_map(world, a.voxel, a.min_obs)
    write_pcb(a.out, PointCloud(vm.points, 0.0))
    log.info("static map: %d points in %d voxels", len(vm), vm.num_voxels)
    return 0


def cmd_dynamic_mask(a) -> int:
    scan = read_pcb(a.scan)
    pose = None
    if a.poses is not None:
        poses = read_poses(a.poses)
        if a.frame is None or not 0 <= a.frame < len(poses):
            raise ValidationError("--frame must index into --poses")
        pose = poses[a.frame]
        scan = transform_cloud(PointCloud(scan.points, scan.timestamp, scan.labels, scan.features, "sensor"), pose)
    static = read_pcb(a.static)
    vm = VoxelMap.from_points(static.points, a.voxel)
    dyn = classify_dynamic(scan, vm, a.k, a.radius)
    cam, _ = _camera_at(a.camera, pose)
    mask = render_movable_mask(scan.subset(dyn), cam, a.dilation)
    write_pgm(a.out, mask * np.uint8(255))
    if a.out_points:
        write_pcb(a.out_points, scan.subset(dyn))
    return 0


def cmd_lift_masks(a) -> int:
    m = require_valid(load_manifest(a.frames))
    frames = m.split(a.split) if a.split else list(m.frames)
    if not frames:
        raise ValidationError(f"no frames in split {a.split!r}")
    frames = frames[: a.max_frames] if a.max_frames else frames
    poses = m.load_poses()
    anchor = frames[a.anchor]
    grid = _ego_grid(_grid_dims(a.grid), poses[anchor.pose_index])
    items = []
    for fr in frames:
        if fr.mask is None or fr.depth is None:
            raise ValidationError(f"frame at t={fr.timestamp} lacks a mask or depth file")
        movable = None
        if fr.movable is not None and not a.ignore_movable:
            movable = (read_pgm(m.path(fr.movable)) > 0).astype(np.uint8)
        items.append(BevFrame(read_pgm(m.path(fr.mask)).astype(np.int64), pgm_to_depth(read_pgm(m.path(fr.depth))),
                              m.camera_for(fr, poses), movable))
    merged = accumulate_bev_masks(items, grid)
    if merged.max() > 0xFFFF:
        raise FormatError("merged instance ids exceed u16")
    write_bevg(a.out, BevGrid(grid, merged.astype(np.uint16), (merged > 0).astype(np.uint8), "labels"))
    return 0


def cmd_bev_gt(a) -> int:
    scans, poses = _load_sequence(a.scans, a.poses)
    f, win = _window(len(scans), a.frame, a.window)
    grid = _ego_grid(_grid_dims(a.grid), poses[f])
    world = [transform_cloud(scans[i], poses[i]) for i in win]
    sem = build_semantic_map(world, grid)
    if len(world) >= 2:
        vm = build_static_map(world, a.voxel, a.min_obs)
        flags = [vm.contains(c.points) for c in world]
    else:
        flags = [np.ones(len(c), dtype=bool) for c in world]
    elev = build_elevation_map(world, flags, grid, a.bottom_k, _elev_range(a.elev_range))
    _check_finite("elevation map", elev.data)
    write_bevg(a.out_sem, sem)
    write_bevg(a.out_elev, elev)
    if a.out_partition:
        if not a.camera:
            raise ValidationError("--out-partition needs --camera")
        cam, _ = _camera_at(a.camera, poses[f])
        write_bevg(a.out_partition, observation_partition(world[-1], cam, grid))
    return 0


def cmd_splat(a) -> int:
    cloud = read_pcb(a.cloud)
    if cloud.features is None:
        raise ValidationError("splat needs a cloud with per-point features")
    dims = _grid_dims(a.grid)
    if a.poses is not None:
        poses = read_poses(a.poses)
        f = len(poses) - 1 if a.frame is None else a.frame
        grid = _ego_grid(dims, poses[f])
    else:
        ox, oy = (float(v) for v in a.origin.split(","))
        grid = GridConfig(dims.cells_h, dims.cells_w, dims.resolution, (ox, oy), np.deg2rad(a.yaw_deg))
    res = splat_features(cloud.points, cloud.features, grid)
    _check_finite("splat", res.features.data)
    write_bevg(a.out, res.features)
    if a.out_weight:
        write_bevg(a.out_weight, res.weight)
    log.info("splat dropped %d points outside the grid", res.dropped)
    return 0


def _loss_cases(seed: int):
    """(name, value, reference, tolerance, relative) rows."""
    rng = np.random.default_rng(seed)
    rows = []
    z = np.tile([[1.0, 0.0]], (3, 1))
    rows.append(("supcon_identical_3", losses.supcon_loss(z, [0, 0, 0]), float(np.log(2)), 1e-9, False))
    logits = np.zeros((4, 5, 128))
    bins = np.full((4, 5), 7)
    rows.append(("depth_ce_uniform", float(losses.cross_entropy(logits, bins).mean()), float(np.log(128)), 1e-9,
                 False))
    z = rng.normal(size=(8, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    lab = rng.integers(0, 3, 8)
    lab[:2] = lab[2]
    f = lambda x: losses.supcon_loss(x, lab, 0.1, renormalize=False)  # noqa: E731
    rows.append(_grad_row("supcon_grad", losses.supcon_grad(z, lab, 0.1), losses.finite_diff_grad(f, z)))
    pred, gt = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    f = lambda x: losses.elevation_l1(x, gt)  # noqa: E731
    rows.append(_grad_row("elevation_l1_grad", losses.elevation_l1_grad(pred, gt), losses.finite_diff_grad(f, pred)))
    gbin = rng.integers(0, 4, (8, 8))
    f = lambda x: float(np.abs(x - gt)[gbin != 0].mean())  # noqa: E731
    rows.append(_grad_row("depth_l1_grad", losses.depth_l1_grad(pred, gt, gbin), losses.finite_diff_grad(f, pred)))
    return rows


def _grad_row(name, analytic, numeric):
    err = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
    return (name, err, 0.0, 1e-4, True)


def cmd_loss_check(a) -> int:
    rows = _loss_cases(a.seed)
    if a.case != "all":
        rows = [r for r in rows if r[0] == a.case]
        if not rows:
            raise ValidationError(f"unknown case {a.case!r}")
    if a.features:
        feats, labels = read_bevg(a.features), read_bevg(a.labels) if a.labels else None
        if labels is None:
            raise ValidationError("--features needs --labels")
        sel = feats.mask & labels.mask & (labels.data > 0)
        z = feats.data.reshape(-1, feats.channels)[sel.reshape(-1)]
        lab = labels.data.reshape(-1)[sel.reshape(-1)]
        rng = np.random.default_rng(a.seed)
        pick = np.sort(rng.choice(len(z), size=min(len(z), a.max_patches), replace=False))
        val = losses.supcon_loss(z[pick], lab[pick], a.tau)
        if not np.isfinite(val):
            raise NumericError("supcon loss on file features is not finite")
        rows.append(("supcon_file_features", val, val, 0.0, False))
    ok_all = True
    table = []
    for name, value, ref, tol, relative in rows:
        err = value if relative else abs(value - ref)
        ok = bool(err <= tol)
        ok_all &= ok
        table.append({"case": name, "value": value, "reference": ref, "error": err, "tolerance": tol, "pass": ok})
        print(f"{'PASS' if ok else 'FAIL'}  {name:24s} value={value:.12g} err={err:.3g} tol={tol:g}")
    if a.report:
        _write_json(a.report, {"seed": a.seed, "cases": table, "pass": ok_all})
    return 0 if ok_all else NumericError.exit_code


def _region_block(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except EmptyRegion:
        return None


def cmd_eval_ssc(a) -> int:
    pred, gt = read_bevg(a.pred), read_bevg(a.gt)
    part = read_bevg(a.partition).data
    report = {"iou": {}, "mae": {}}
    for region in ("occluded", "unoccluded", "both"):
        r = _region_block(iou, pred.data, np.where(gt.mask, gt.data, 0), region, part)
        report["iou"][region] = None if r is None else {
            "miou": r.miou, "per_class": {str(k): v for k, v in sorted(r.per_class.items())}, "cells": r.cells}
    if a.pred_elev and a.gt_elev:
        pe, ge = read_bevg(a.pred_elev), read_bevg(a.gt_elev)
        for region in ("occluded", "unoccluded", "both"):
            report["mae"][region] = _region_block(mae, pe.data, ge.data, region, part, valid=ge.mask & pe.mask)
    _write_json(a.report, report)
    return 0


def _gather(manifest_path, split):
    m = require_valid(load_manifest(manifest_path))
    frames = m.split(split) if split and m.split(split) else list(m.frames)
    feats, labels = [], []
    for fr in frames:
        if fr.features is None or fr.labels is None:
            raise ValidationError(f"frame at t={fr.timestamp} lacks features or labels")
        fg, lg = read_bevg(m.path(fr.features)), read_bevg(m.path(fr.labels))
        sel = (fg.mask & lg.mask & (lg.data > 0)).reshape(-1)
        feats.append(fg.data.reshape(-1, fg.channels)[sel])
        labels.append(lg.data.reshape(-1)[sel].astype(np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def cmd_eval_unsup(a) -> int:
    vf, vl = _gather(a.val, "val")
    tf, tl = _gather(a.test, "test")
    if a.max_cells and len(vf) > a.max_cells:
        pick = np.sort(np.random.default_rng(a.seed).choice(len(vf), a.max_cells, replace=False))
        vf, vl = vf[pick], vl[pick]
    rep = unsup_ssc_eval(vf, vl, tf, tl, a.k, a.seed, pca_dim=a.pca_dim, n_init=a.n_init)
    _write_json(a.report, {
        "k": a.k, "seed": a.seed, "n_init": a.n_init, "miou": rep.iou.miou,
        "per_class": {str(k): v for k, v in sorted(rep.iou.per_class.items())},
        "mapping": {str(k): v for k, v in sorted(rep.mapping.items())},
        "objective": rep.cluster_model.objective_history,
    })
    return 0


def cmd_render(a) -> int:
    write_ppm(a.out, render_grid_ppm(read_bevg(a.grid_file), a.mode))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--jobs", type=int, default=1, help="worker cap for per-frame parallelism")
        return sp

    s = add("synth", cmd_synth, "render a synthetic sequence with manifest")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", default="128x128x0.2", help="per-frame label/feature grid HxWxRES")
    s.add_argument("--regions", type=int, default=5)
    s.add_argument("--dynamic", type=int, default=1)
    s.add_argument("--feature-dim", type=int, default=8)
    s.add_argument("--feature-sigma", type=float, default=0.05)
    s.add_argument("--split-instances", action="store_true")
    s.add_argument("--shuffle-instances", action="store_true", help="per-frame random instance ids")

    s = add("depth-gt", cmd_depth_gt, "pseudo ground-truth depth from accumulated scans and stereo")
    s.add_argument("--scans", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--frame", type=int, default=None, help="target frame index (default: last)")
    s.add_argument("--window", type=int, default=50, help="number of scans accumulated up to the frame")
    s.add_argument("--stereo-left")
    s.add_argument("--stereo-right")
    s.add_argument("--disparity")
    s.add_argument("--baseline", type=float, default=None, help="overrides the camera file's baseline")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--rel-threshold", type=float, default=0.30)
    s.add_argument("--idw-radius", type=int, default=4)
    s.add_argument("--idw-power", type=float, default=2.0)
    s.add_argument("--edge-sigma", type=float, default=None, help="enable the intensity guide weight")
    s.add_argument("--max-disparity", type=int, default=48)

    s = add("static-map", cmd_static_map, "voxel-persistence static point map")
    s.add_argument("--scans", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--voxel", type=float, default=0.2)
    s.add_argument("--min-obs", type=int, default=2)
    s.add_argument("--out", required=True)

    s = add("dynamic-mask", cmd_dynamic_mask, "movable-pixel mask from points missing in the static map")
    s.add_argument("--scan", required=True)
    s.add_argument("--static", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--poses", help="sensor poses; with --frame the scan is read in the sensor frame")
    s.add_argument("--frame", type=int)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--radius", type=float, default=0.2)
    s.add_argument("--voxel", type=float, default=0.2, help="lookup voxel size for the static map")
    s.add_argument("--dilation", type=int, default=2)
    s.add_argument("--out", required=True)
    s.add_argument("--out-points")

    s = add("lift-masks", cmd_lift_masks, "lift image instance masks into BEV and merge them across frames")
    s.add_argument("--frames", required=True, help="manifest")
    s.add_argument("--grid", default="256x256x0.1")
    s.add_argument("--split")
    s.add_argument("--anchor", type=int, default=0, help="index of the frame defining the grid")
    s.add_argument("--max-frames", type=int, default=0)
    s.add_argument("--ignore-movable", action="store_true")
    s.add_argument("--out", required=True)

    s = add("bev-gt", cmd_bev_gt, "semantic and elevation ground-truth grids from labelled scans")
    s.add_argument("--scans", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--grid", default="256x256x0.1")
    s.add_argument("--elev-range", default="-1.2:1.8")
    s.add_argument("--frame", type=int, default=None, help="ego frame (default: last)")
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--voxel", type=float, default=0.2)
    s.add_argument("--min-obs", type=int, default=2)
    s.add_argument("--bottom-k", type=int, default=3)
    s.add_argument("--camera")
    s.add_argument("--out-sem", required=True)
    s.add_argument("--out-elev", required=True)
    s.add_argument("--out-partition")

    s = add("splat", cmd_splat, "bilinear splat of point features onto a grid")
    s.add_argument("--cloud", required=True)
    s.add_argument("--grid", default="256x256x0.1")
    s.add_argument("--origin", default="0,0", help="world x,y of the grid's far-left corner")
    s.add_argument("--yaw-deg", type=float, default=0.0)
    s.add_argument("--poses", help="anchor the grid on a pose instead of --origin")
    s.add_argument("--frame", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--out-weight")

    s = add("loss-check", cmd_loss_check, "analytic vs numeric loss and gradient checks")
    s.add_argument("--case", default="all")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--features")
    s.add_argument("--labels")
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--max-patches", type=int, default=256)
    s.add_argument("--report")

    s = add("eval-ssc", cmd_eval_ssc, "IoU and elevation MAE per region")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--pred-elev")
    s.add_argument("--gt-elev")
    s.add_argument("--report", required=True)

    s = add("eval-unsup", cmd_eval_unsup, "cluster, match and score features without labels")
    s.add_argument("--val", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--pca-dim", type=int, default=None)
    s.add_argument("--n-init", type=int, default=10, help="k-means restarts; the lowest objective wins")
    s.add_argument("--max-cells", type=int, default=20000, help="subsample validation cells for kmeans")
    s.add_argument("--report", required=True)

    s = add("render", cmd_render, "render a grid file as a PPM image")
    s.add_argument("--grid-file", required=True)
    s.add_argument("--mode", choices=("labels", "elevation", "feature-pca"), default="labels")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=_LEVELS.get(os.environ.get("BEVLAB_LOG", "warn").lower(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BevlabError as exc:
        print(f"bevlab {args.command}: {exc}", file=sys.stderr)
        for d in getattr(exc, "diagnostics", []):
            print(f"  - {d}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bevlab {args.command}: {exc}", file=sys.stderr)
        return FormatError.exit_code
    except FloatingPointError as exc:
        print(f"bevlab {args.command}: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
