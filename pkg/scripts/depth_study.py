"""Per-seed table of depth label density and infill error against rendered truth.

    python scripts/depth_study.py --seeds 0-9 --window 50
"""
import argparse
import time

import numpy as np

from bevlab.depth_labels import DepthLabelConfig, make_depth_label
from bevlab.synth import RigConfig, generate_scene, render_frame, trajectory


def seed_range(text: str) -> list[int]:
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def study(seed: int, window: int, cfg: DepthLabelConfig) -> dict:
    scene = generate_scene(seed)
    rig = RigConfig()
    poses = trajectory(scene, window)
    scans = [render_frame(scene, p, rig, with_images=False) for p in poses]
    target = render_frame(scene, poses[-1], rig)
    t0 = time.perf_counter()
    lab = make_depth_label([f.scan for f in scans], [f.lidar_pose for f in scans], target.camera,
                           (target.left, target.right), rig.baseline, cfg)
    secs = time.perf_counter() - t0
    surface = target.depth > 0
    infilled = (lab.filtered == 0) & (lab.depth > 0) & surface
    return {
        "seed": seed,
        "before": float((lab.filtered > 0)[surface].mean()),
        "after": float((lab.depth > 0)[surface].mean()),
        "image_after": lab.density_after,
        "mae": float(np.abs(lab.depth - target.depth)[infilled].mean()) if infilled.any() else float("nan"),
        "secs": secs,
    }


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--window", type=int, default=50)
    ap.add_argument("--rel-threshold", type=float, default=0.30)
    ap.add_argument("--idw-radius", type=int, default=4)
    a = ap.parse_args()
    cfg = DepthLabelConfig(rel_threshold=a.rel_threshold, idw_radius=a.idw_radius)
    print(f"{'seed':>4} {'before':>7} {'after':>7} {'image':>7} {'mae_m':>7} {'secs':>6}")
    for s in seed_range(a.seeds):
        r = study(s, a.window, cfg)
        print(f"{r['seed']:>4} {r['before']:7.3f} {r['after']:7.3f} {r['image_after']:7.3f} "
              f"{r['mae']:7.4f} {r['secs']:6.2f}")


if __name__ == "__main__":
    cli()
