"""Binary and text file formats: PCB1 clouds, pose lists, camera files, PGM/PPM, BEVG grids.

All writers go through :func:`atomic_write` (temp file then rename).
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError
from .geometry import CameraModel, PointCloud, Pose
from .grid import BevGrid, GridConfig

PCB_MAGIC = b"PCB1"
BEVG_MAGIC = b"BEVG"
FMAP_MAGIC = b"FMAP"

DTYPE_F32, DTYPE_U16, DTYPE_U8 = 0, 1, 2
_KIND_BY_DTYPE = {DTYPE_F32: "float", DTYPE_U16: "labels", DTYPE_U8: "validity"}
_DTYPE_BY_KIND = {v: k for k, v in _KIND_BY_DTYPE.items()}
_NP_BY_DTYPE = {DTYPE_F32: "<f4", DTYPE_U16: "<u2", DTYPE_U8: "u1"}


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# -- point clouds -------------------------------------------------------------


def encode_pcb(cloud: PointCloud) -> bytes:
    n = len(cloud)
    flags = (1 if cloud.labels is not None else 0) | (2 if cloud.features is not None else 0)
    zdim = cloud.features.shape[1] if cloud.features is not None else 0
    parts = [PCB_MAGIC, struct.pack("<IBId", n, flags, zdim, float(cloud.timestamp))]
    parts.append(cloud.points.astype("<f4").tobytes())
    if cloud.labels is not None:
        labels = np.asarray(cloud.labels)
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise FormatError("labels do not fit in u16")
        parts.append(labels.astype("<u2").tobytes())
    if cloud.features is not None:
        parts.append(cloud.features.astype("<f4").tobytes())
    return b"".join(parts)


def decode_pcb(buf: bytes, frame: str = "world") -> PointCloud:
    if buf[:4] != PCB_MAGIC:
        raise FormatError("not a PCB1 file")
    head = struct.calcsize("<IBId")
    n, flags, zdim, ts = struct.unpack_from("<IBId", buf, 4)
    off = 4 + head
    need = off + 12 * n + (2 * n if flags & 1 else 0) + (4 * n * zdim if flags & 2 else 0)
    if len(buf) != need:
        raise FormatError(f"PCB1 size {len(buf)} != expected {need}")
    pts = np.frombuffer(buf, "<f4", 3 * n, off).reshape(n, 3).astype(float)
    off += 12 * n
    labels = feats = None
    if flags & 1:
        labels = np.frombuffer(buf, "<u2", n, off).astype(np.int64)
        off += 2 * n
    if flags & 2:
        feats = np.frombuffer(buf, "<f4", n * zdim, off).reshape(n, zdim).astype(float)
    return PointCloud(pts, ts, labels, feats, frame)


def write_pcb(path, cloud: PointCloud) -> None:
    atomic_write(path, encode_pcb(cloud))


def read_pcb(path, frame: str = "world") -> PointCloud:
    return decode_pcb(_read(path), frame)


# -- poses and cameras --------------------------------------------------------


def format_poses(poses) -> str:
    lines = []
    for p in poses:
        vals = [p.timestamp, *p.translation, *p.rotation]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_poses(text: str) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ts, tx, ty, tz, qw, qx, qy, qz = (float(v) for v in line.split())
        except ValueError as exc:
            raise ParseError(f"pose line {lineno}: expected 8 numbers") from exc
        q = np.array([qw, qx, qy, qz])
        # text round trips lose a few ulps of norm
        poses.append(Pose(q / np.linalg.norm(q), [tx, ty, tz], ts))
    return poses


def write_poses(path, poses) -> None:
    atomic_write(path, format_poses(poses).encode())


def read_poses(path) -> list[Pose]:
    return parse_poses(_read(path).decode())


def format_camera(camera: CameraModel, **extra) -> str:
    e = camera.extrinsics
    fields = {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": int(camera.width), "height": int(camera.height),
        "qw": e.rotation[0], "qx": e.rotation[1], "qy": e.rotation[2], "qz": e.rotation[3],
        "tx": e.translation[0], "ty": e.translation[1], "tz": e.translation[2],
    }
    fields.update(extra)

    def fmt(v):
        if isinstance(v, str):
            return v
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return repr(float(v))

    return "".join(f"{k}={fmt(v)}\n" for k, v in fields.items())


def parse_camera(text: str) -> tuple[CameraModel, dict]:
    """Returns the camera and any unrecognised keys (e.g. ``baseline``, mount pose)."""
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"camera line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        q = np.array([float(kv.pop(k, d)) for k, d in (("qw", 1), ("qx", 0), ("qy", 0), ("qz", 0))])
        t = [float(kv.pop(k, 0)) for k in ("tx", "ty", "tz")]
        cam = CameraModel(
            float(kv.pop("fx")), float(kv.pop("fy")), float(kv.pop("cx")), float(kv.pop("cy")),
            int(kv.pop("width")), int(kv.pop("height")), Pose(q / np.linalg.norm(q), t),
        )
    except KeyError as exc:
        raise ParseError(f"camera file missing key {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"camera file: {exc}") from exc
    return cam, kv


def write_camera(path, camera: CameraModel, **extra) -> None:
    atomic_write(path, format_camera(camera, **extra).encode())


def read_camera(path) -> tuple[CameraModel, dict]:
    return parse_camera(_read(path).decode())


# -- netpbm -------------------------------------------------------------------


def encode_pgm(img) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError("PGM needs a 2-D image")
    h, w = img.shape
    if img.dtype == np.uint8:
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    if img.dtype == np.uint16:
        return f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes()
    raise FormatError(f"PGM needs uint8 or uint16, got {img.dtype}")


def _netpbm_header(buf: bytes, magic: bytes, nfields: int):
    if buf[:2] != magic:
        raise FormatError(f"expected {magic!r} netpbm file")
    fields, pos = [], 2
    while len(fields) < nfields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    return fields, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    (w, h, maxval), off = _netpbm_header(buf, b"P5", 3)
    dt = "u1" if maxval < 256 else ">u2"
    n = w * h * (1 if maxval < 256 else 2)
    if len(buf) - off < n:
        raise FormatError("truncated PGM")
    img = np.frombuffer(buf, dt, w * h, off).reshape(h, w)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def write_pgm(path, img) -> None:
    atomic_write(path, encode_pgm(img))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(_read(path))


def encode_ppm(rgb) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    (w, h, _), off = _netpbm_header(buf, b"P6", 3)
    return np.frombuffer(buf, "u1", w * h * 3, off).reshape(h, w, 3).copy()


def write_ppm(path, rgb) -> None:
    atomic_write(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(_read(path))


def depth_to_pgm(depth) -> np.ndarray:
    """Meters to u16 millimeters; 0 stays invalid, values are clipped to 65.535 m."""
    mm = np.rint(np.asarray(depth, dtype=float) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def pgm_to_depth(img) -> np.ndarray:
    return np.asarray(img, dtype=float) / 1000.0


def disparity_to_pgm(disp) -> np.ndarray:
    return np.clip(np.rint(np.asarray(disp, dtype=float) * 256.0), 0, 65535).astype(np.uint16)


def pgm_to_disparity(img) -> np.ndarray:
    return np.asarray(img, dtype=float) / 256.0


# -- grids --------------------------------------------------------------------

_BEVG_HEAD = "<IIIBfff"


def encode_bevg(grid: BevGrid, magic: bytes = BEVG_MAGIC) -> bytes:
    cfg = grid.config
    dtype = _DTYPE_BY_KIND[grid.kind]
    payload = np.asarray(grid.data)
    if dtype == DTYPE_U16 and payload.size and (payload.min() < 0 or payload.max() > 0xFFFF):
        raise FormatError("label grid does not fit in u16")
    head = struct.pack(_BEVG_HEAD, cfg.cells_h, cfg.cells_w, grid.channels, dtype, cfg.resolution, *cfg.origin)
    body = payload.astype(_NP_BY_DTYPE[dtype]).tobytes()
    tail = b"\x00"
    if grid.valid is not None:
        tail = b"\x01" + np.asarray(grid.valid).astype("u1").tobytes()
    return magic + head + body + tail


def decode_bevg(buf: bytes, magic: bytes = BEVG_MAGIC) -> BevGrid:
    if buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    h, w, c, dtype, res, ox, oy = struct.unpack_from(_BEVG_HEAD, buf, 4)
    if dtype not in _NP_BY_DTYPE:
        raise FormatError(f"unknown grid dtype {dtype}")
    off = 4 + struct.calcsize(_BEVG_HEAD)
    np_dt = np.dtype(_NP_BY_DTYPE[dtype])
    n = h * w * c
    end = off + n * np_dt.itemsize
    if len(buf) < end:
        raise FormatError("truncated grid payload")
    data = np.frombuffer(buf, np_dt, n, off)
    data = data.reshape(h, w) if (c == 1 and dtype != DTYPE_F32) else data.reshape(h, w, c)
    if dtype == DTYPE_F32:
        data = data.astype(np.float64)
        if c == 1:
            data = data[..., 0]
    else:
        data = data.astype(np.int64)
    valid = None
    if len(buf) > end and buf[end] == 1:
        valid = np.frombuffer(buf, "u1", h * w, end + 1).reshape(h, w).copy()
    cfg = GridConfig(h, w, float(res), (float(ox), float(oy)))
    return BevGrid(cfg, data, valid, _KIND_BY_DTYPE[dtype])


def write_bevg(path, grid: BevGrid, magic: bytes = BEVG_MAGIC) -> None:
    atomic_write(path, encode_bevg(grid, magic))


def read_bevg(path, magic: bytes = BEVG_MAGIC) -> BevGrid:
    return decode_bevg(_read(path), magic)


def write_fmap(path, feats, valid=None) -> None:
    """Per-pixel feature image (H, W, Z); same layout as BEVG with zero resolution."""
    feats = np.asarray(feats, dtype=float)
    if feats.ndim == 2:
        feats = feats[..., None]
    h, w, _ = feats.shape
    cfg = GridConfig(h, w, 0.0)
    write_bevg(path, BevGrid(cfg, feats, valid, "float"), FMAP_MAGIC)


def read_fmap(path) -> BevGrid:
    return read_bevg(path, FMAP_MAGIC)
