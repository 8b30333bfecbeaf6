"""Run the full label pipeline on a fresh synthetic sequence through the CLI.

    python scripts/run_pipeline.py --out /tmp/run --seed 3 --frames 20
"""
import argparse
import json
import time
from pathlib import Path

from bevlab.cli import main


def step(name, argv):
    t0 = time.perf_counter()
    rc = main(argv)
    print(f"{name:<14} rc={rc} {time.perf_counter() - t0:6.2f} s")
    if rc != 0:
        raise SystemExit(rc)


def run(out: Path, seed: int, frames: int, grid: str) -> dict:
    d = out / "data"
    step("synth", ["synth", "--seed", str(seed), "--frames", str(frames), "--out", str(d), "--grid", grid])
    seq = ["--scans", str(d / "scans"), "--poses", str(d / "poses.txt")]
    last = frames - 1
    step("depth-gt", ["depth-gt", *seq, "--camera", str(d / "camera.txt"),
                      "--stereo-left", str(d / f"left/{last:06d}.pgm"),
                      "--stereo-right", str(d / f"right/{last:06d}.pgm"),
                      "--out", str(out / "depth.pgm"), "--report", str(out / "depth.json")])
    step("static-map", ["static-map", *seq, "--out", str(out / "static.pcb")])
    step("dynamic-mask", ["dynamic-mask", "--scan", str(d / f"scans/{last:06d}.pcb"), "--static",
                          str(out / "static.pcb"), "--camera", str(d / "camera.txt"), "--poses",
                          str(d / "poses.txt"), "--frame", str(last), "--out", str(out / "movable.pgm")])
    step("lift-masks", ["lift-masks", "--frames", str(d / "manifest.json"), "--grid", grid,
                        "--out", str(out / "instances.bevg")])
    step("bev-gt", ["bev-gt", *seq, "--grid", grid, "--camera", str(d / "camera.txt"),
                    "--out-sem", str(out / "sem.bevg"), "--out-elev", str(out / "elev.bevg"),
                    "--out-partition", str(out / "part.bevg")])
    step("eval-ssc", ["eval-ssc", "--pred", str(out / "sem.bevg"), "--gt", str(out / "sem.bevg"),
                      "--partition", str(out / "part.bevg"), "--report", str(out / "ssc.json")])
    step("eval-unsup", ["eval-unsup", "--val", str(d / "manifest.json"), "--test", str(d / "manifest.json"),
                        "--k", "5", "--seed", str(seed), "--report", str(out / "unsup.json")])
    for name in ("sem", "elev", "instances"):
        step(f"render {name}", ["render", "--grid-file", str(out / f"{name}.bevg"), "--out", str(out / f"{name}.ppm")])
    return {k: json.loads((out / f"{k}.json").read_text()) for k in ("depth", "ssc", "unsup")}


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--grid", default="128x128x0.2")
    a = ap.parse_args()
    a.out.mkdir(parents=True, exist_ok=True)
    reps = run(a.out, a.seed, a.frames, a.grid)
    print(f"depth density {reps['depth']['density_before_infill']:.3f} -> {reps['depth']['density_after_infill']:.3f}")
    print(f"unsupervised mIoU {reps['unsup']['miou']:.3f}")


if __name__ == "__main__":
    cli()
