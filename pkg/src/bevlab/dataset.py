"""Write a rendered synthetic sequence to disk in the package's file formats."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bev_truth import observation_partition
from .geometry import transform_cloud
from .grid import OUTSIDE, BevGrid, GridConfig
from .io import depth_to_pgm, write_bevg, write_camera, write_pcb, write_pgm, write_poses
from .manifest import FrameRecord, Manifest, mount_to_keys, split_tags
from .synth import RigConfig, SceneConfig, analytic_grids, generate_scene, render_frame, trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetConfig:
    frames: int = 60
    dt: float = 0.1
    speed: float = 1.0
    grid: str = "128x128x0.2"
    feature_dim: int = 8
    feature_sigma: float = 0.05
    shuffle_instances: bool = False
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)


def class_embeddings(seed: int, num_classes: int, dim: int) -> np.ndarray:
    """Unit-norm class prototypes; row 0 (unlabelled) is zero."""
    rng = np.random.default_rng([seed, 7919])
    e = rng.normal(size=(num_classes + 1, dim))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    e[0] = 0.0
    return e


def _gray8(img) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_synth_dataset(out, seed: int, cfg: DatasetConfig = DatasetConfig(), jobs: int = 1) -> Manifest:
    out = Path(out)
    scene = generate_scene(seed, cfg.scene)
    rig = cfg.rig
    base_poses = trajectory(scene, cfg.frames, cfg.dt, cfg.speed)
    dims = GridConfig.parse(cfg.grid)
    emb = class_embeddings(seed, int(scene.classes.max()), cfg.feature_dim)
    tags = split_tags(cfg.frames)

    def one(i):
        fr = render_frame(scene, base_poses[i], rig, shuffle_instances=cfg.shuffle_instances)
        name = f"{i:06d}"
        write_pcb(out / "scans" / f"{name}.pcb", fr.scan)
        write_pgm(out / "left" / f"{name}.pgm", _gray8(fr.left))
        write_pgm(out / "right" / f"{name}.pgm", _gray8(fr.right))
        write_pgm(out / "depth" / f"{name}.pgm", depth_to_pgm(fr.depth))
        write_pgm(out / "masks" / f"{name}.pgm", fr.instance_mask.astype(np.uint16))
        write_pgm(out / "movable" / f"{name}.pgm", (fr.movable > 0).astype(np.uint8) * 255)
        grid = GridConfig.ego(fr.lidar_pose, dims.cells_h, dims.cells_w, dims.resolution)
        part = observation_partition(transform_cloud(fr.scan, fr.lidar_pose), fr.camera, grid)
        seen = (part.data != OUTSIDE).astype(np.uint8)
        cls, _ = analytic_grids(scene, grid)
        write_bevg(out / "labels" / f"{name}.bevg", BevGrid(grid, cls.astype(np.uint16), seen, "labels"))
        rng = np.random.default_rng([seed, i, 104729])
        feats = emb[cls] + cfg.feature_sigma * rng.normal(size=cls.shape + (cfg.feature_dim,))
        write_bevg(out / "features" / f"{name}.bevg", BevGrid(grid, feats * seen[..., None], seen, "float"))
        rec = FrameRecord(
            timestamp=float(fr.timestamp), scan=f"scans/{name}.pcb", pose_index=i, camera="front",
            splits=tags[i], mask=f"masks/{name}.pgm", depth=f"depth/{name}.pgm",
            movable=f"movable/{name}.pgm", left=f"left/{name}.pgm", right=f"right/{name}.pgm",
            features=f"features/{name}.bevg", labels=f"labels/{name}.bevg",
        )
        return rec, fr.lidar_pose

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, range(cfg.frames)))
    else:
        results = [one(i) for i in range(cfg.frames)]
    write_poses(out / "poses.txt", [p for _, p in results])
    write_camera(out / "camera.txt", rig.intrinsics(), baseline=rig.baseline, **mount_to_keys(rig.camera_to_lidar))
    m = Manifest(out, "poses.txt", {"front": "camera.txt"}, [r for r, _ in results], cfg.grid, seed)
    m.save(out / "manifest.json")
    log.info("wrote %d frames to %s", cfg.frames, out)
    return m
