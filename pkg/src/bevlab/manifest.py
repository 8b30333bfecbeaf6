"""JSON dataset manifests: frame records, a camera table and split tags.

Paths inside a manifest are relative to the manifest's directory. A camera
entry points at a camera file; when that file carries ``mount_*`` keys the
per-frame camera is the intrinsics mounted on the frame's sensor pose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import CameraModel, Pose, mounted_camera
from .io import atomic_write, read_camera, read_poses

SPLITS = ("pretrain", "train", "val", "test")
# frame keys holding file paths
FILE_KEYS = ("scan", "mask", "depth", "movable", "left", "right", "features", "labels")
MOUNT_KEYS = ("mount_qw", "mount_qx", "mount_qy", "mount_qz", "mount_tx", "mount_ty", "mount_tz")


@dataclass
class FrameRecord:
    timestamp: float
    scan: str
    pose_index: int
    camera: str
    splits: tuple = ()
    mask: Optional[str] = None
    depth: Optional[str] = None
    movable: Optional[str] = None
    left: Optional[str] = None
    right: Optional[str] = None
    features: Optional[str] = None
    labels: Optional[str] = None

    def to_json(self) -> dict:
        out = {"timestamp": self.timestamp, "scan": self.scan, "pose_index": self.pose_index, "camera": self.camera,
               "splits": list(self.splits)}
        for k in FILE_KEYS[1:]:
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        return out


@dataclass
class Manifest:
    root: Path
    poses: str
    cameras: dict  # camera id -> camera file
    frames: list = field(default_factory=list)
    grid: Optional[str] = None
    seed: Optional[int] = None

    def path(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> list[FrameRecord]:
        return [f for f in self.frames if name in f.splits]

    def load_poses(self) -> list[Pose]:
        return read_poses(self.path(self.poses))

    def camera_for(self, frame: FrameRecord, poses: Optional[list] = None) -> CameraModel:
        """World->camera model for ``frame``."""
        cam, extra = read_camera(self.path(self.cameras[frame.camera]))
        mount = mount_from_keys(extra)
        if mount is None:
            return cam
        poses = self.load_poses() if poses is None else poses
        return mounted_camera(cam, mount, poses[frame.pose_index])

    def to_json(self) -> dict:
        out = {"poses": self.poses, "cameras": self.cameras, "frames": [f.to_json() for f in self.frames]}
        if self.grid is not None:
            out["grid"] = self.grid
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def save(self, path) -> None:
        atomic_write(path, (json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n").encode())


def mount_from_keys(extra: dict) -> Optional[Pose]:
    if not any(k in extra for k in MOUNT_KEYS):
        return None
    try:
        vals = [float(extra[k]) for k in MOUNT_KEYS]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"incomplete camera mount: {exc}") from exc
    q = np.array(vals[:4])
    return Pose(q / np.linalg.norm(q), vals[4:])


def mount_to_keys(mount: Pose) -> dict:
    return dict(zip(MOUNT_KEYS, [*map(float, mount.rotation), *map(float, mount.translation)]))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("manifest must be a JSON object")
    try:
        frames = []
        for i, fr in enumerate(raw.get("frames", [])):
            kw = {k: fr[k] for k in FILE_KEYS[1:] if k in fr}
            frames.append(FrameRecord(float(fr["timestamp"]), str(fr["scan"]), int(fr["pose_index"]),
                                      str(fr["camera"]), tuple(fr.get("splits", ())), **kw))
        return Manifest(path.parent, str(raw["poses"]), dict(raw["cameras"]), frames, raw.get("grid"),
                        raw.get("seed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest record malformed: {exc!r}") from exc


def validate_manifest(m: Manifest, check_files: bool = True) -> list[str]:
    """Diagnostics for a manifest; an empty list means it is clean."""
    problems = []
    if not m.frames:
        problems.append("manifest has no frames")
    if check_files and not m.path(m.poses).exists():
        problems.append(f"missing pose file {m.poses}")
    for cid, cfile in m.cameras.items():
        if check_files and not m.path(cfile).exists():
            problems.append(f"camera {cid}: missing file {cfile}")
    npose = None
    if check_files and m.path(m.poses).exists():
        try:
            npose = len(m.load_poses())
        except ParseError as exc:
            problems.append(f"pose file: {exc}")
    prev = -np.inf
    for i, fr in enumerate(m.frames):
        if not fr.timestamp > prev:
            problems.append(f"frame {i}: timestamp {fr.timestamp} not after {prev}")
        prev = fr.timestamp
        if fr.camera not in m.cameras:
            problems.append(f"frame {i}: unknown camera {fr.camera!r}")
        if npose is not None and not 0 <= fr.pose_index < npose:
            problems.append(f"frame {i}: pose index {fr.pose_index} out of range")
        bad = [s for s in fr.splits if s not in SPLITS]
        if bad:
            problems.append(f"frame {i}: unknown split tags {bad}")
        # pretraining frames are drawn from the training pool; any other pairing is a leak
        held = [s for s in fr.splits if s in ("train", "val", "test")]
        if len(held) > 1:
            problems.append(f"frame {i}: overlapping splits {held}")
        if "pretrain" in fr.splits and any(s in fr.splits for s in ("val", "test")):
            problems.append(f"frame {i}: pretrain overlaps an evaluation split")
        if check_files:
            for k in FILE_KEYS:
                rel = getattr(fr, k)
                if rel is not None and not m.path(rel).exists():
                    problems.append(f"frame {i}: missing {k} file {rel}")
    return problems


def require_valid(m: Manifest, check_files: bool = True) -> Manifest:
    problems = validate_manifest(m, check_files)
    if problems:
        raise ValidationError(f"manifest has {len(problems)} problem(s)", diagnostics=problems)
    return m


def split_tags(n: int, fractions=(0.70, 0.15, 0.15)) -> list[tuple]:
    """Contiguous train/val/test blocks; training frames are also pretraining frames."""
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    tags = []
    for i in range(n):
        if i < n_train:
            tags.append(("pretrain", "train"))
        elif i < n_train + n_val:
            tags.append(("val",))
        else:
            tags.append(("test",))
    return tags
