"""On-disk bundle format.

A bundle directory holds ``manifest`` (JSON text), ``rgb_%04d.bin``,
``depth_%04d.bin`` and, for synthetic bundles, ``gt_depth.bin``. Every blob
is a 16-byte header (``MBDB``, u32 H, u32 W, u32 C, little-endian) followed
by row-major, channel-interleaved little-endian float32 values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .bundle import Bundle, Frame
from .errors import BundleFormatError, DimensionMismatchError, TruncatedBlobError, VersionMismatchError
from .geometry import Intrinsics, Pose
from .image import ImageGrid

SCHEMA_VERSION = 1
MANIFEST = "manifest"
BLOB_MAGIC = b"MBDB"
_HEADER = struct.Struct("<4sIII")


def write_blob(path, data) -> None:
    a = np.asarray(data.data if isinstance(data, ImageGrid) else data)
    if a.ndim == 2:
        a = a[:, :, None]
    H, W, C = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BLOB_MAGIC, H, W, C))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_blob(path, expect_shape=None) -> ImageGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedBlobError(f"{path}: header truncated")
    magic, H, W, C = _HEADER.unpack_from(raw, 0)
    if magic != BLOB_MAGIC:
        raise BundleFormatError(f"{path}: bad magic {magic!r}")
    if expect_shape is not None and (H, W, C) != tuple(expect_shape):
        raise DimensionMismatchError(f"{path}: blob is {H}x{W}x{C}, manifest says {tuple(expect_shape)}")
    n = H * W * C
    if len(raw) - _HEADER.size != 4 * n:
        raise TruncatedBlobError(f"{path}: expected {n} floats, found {(len(raw) - _HEADER.size) / 4:g}")
    a = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, C).astype(np.float32)
    return ImageGrid(a)


def write_bundle(bundle: Bundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, f in enumerate(bundle.frames):
        rgb, depth = f"rgb_{i:04d}.bin", f"depth_{i:04d}.bin"
        write_blob(d / rgb, f.image)
        write_blob(d / depth, f.depth)
        frames.append(
            {
                "pose": [float(x) for x in f.pose.matrix.ravel()],
                "pose_approximate": bool(f.pose.approximate),
                "intrinsics_rgb": [float(x) for x in f.intrinsics_rgb.as_tuple()],
                "timestamp_ns": int(f.timestamp_ns),
                "rgb": rgb,
                "depth": depth,
            }
        )
    gt = None
    if bundle.gt_depth is not None:
        gt = "gt_depth.bin"
        write_blob(d / gt, bundle.gt_depth)
    Hd, Wd = bundle.depth_shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "N": len(bundle.frames),
        "H": bundle.height,
        "W": bundle.width,
        "H_d": Hd,
        "W_d": Wd,
        "frames": frames,
        "gt_depth": gt,
        "provenance": bundle.provenance,
    }
    path = d / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no manifest in {directory}")
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"{path}: {e}") from e
    version = m.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionMismatchError(f"{path}: schema version {version}, this reader supports {SCHEMA_VERSION}")
    return m


def read_bundle(directory) -> Bundle:
    d = Path(directory)
    m = read_manifest(d)
    N = m["N"]
    entries = m["frames"]
    # validate everything before touching blob payloads
    on_disk = len(list(d.glob("rgb_*.bin")))
    if len(entries) != N or on_disk != N:
        raise DimensionMismatchError(f"manifest declares N={N}, has {len(entries)} entries and {on_disk} rgb blobs")
    for e in entries:
        for key in ("rgb", "depth"):
            if not (d / e[key]).is_file():
                raise DimensionMismatchError(f"missing blob {e[key]}")
    pose0 = np.asarray(entries[0]["pose"], dtype=np.float64).reshape(4, 4)
    if np.max(np.abs(pose0 - np.eye(4))) > 1e-12:
        raise BundleFormatError("frame 0 pose must be the identity")
    H, W, Hd, Wd = m["H"], m["W"], m["H_d"], m["W_d"]
    frames = []
    for e in entries:
        image = read_blob(d / e["rgb"], (H, W, 3))
        depth = read_blob(d / e["depth"], (Hd, Wd, 1))
        pose = Pose.from_matrix(np.asarray(e["pose"], dtype=np.float64).reshape(4, 4), e.get("pose_approximate", False))
        K = Intrinsics(*e["intrinsics_rgb"])
        frames.append(Frame(image, depth, pose, K, int(e["timestamp_ns"])))
    gt = read_blob(d / m["gt_depth"], (H, W, 1)) if m.get("gt_depth") else None
    return Bundle(tuple(frames), gt, m.get("provenance") or {})
