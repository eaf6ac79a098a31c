"""Evaluation: multi-view photometric error, depth error, normals, report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels
from .bundle import Bundle
from .errors import DegenerateEvalError, EmptyMaskError, InvalidDepthError
from .geometry import Intrinsics, pixel_grid, pose_inverse, project_valid, transform_point, unproject
from .image import ImageGrid


def _depth_plane(depth) -> np.ndarray:
    d = depth.plane() if isinstance(depth, ImageGrid) else np.asarray(depth)
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 3:
        d = d[:, :, 0]
    return d


def _query_hits(depth: np.ndarray, bundle: Bundle, q: int):
    """Query coordinates of every reference pixel and their in-bounds mask."""
    H, W = depth.shape
    ref = bundle.reference
    uv = pixel_grid(H, W).reshape(-1, 2)
    X = unproject(uv, depth.ravel(), ref.intrinsics_rgb)
    frame = bundle.frames[q]
    x, ok = project_valid(transform_point(pose_inverse(frame.pose), X), frame.intrinsics_rgb)
    ok &= (x[:, 0] >= 0) & (x[:, 0] <= W - 1) & (x[:, 1] >= 0) & (x[:, 1] <= H - 1)
    return x, ok


def photometric_error(depth, bundle: Bundle, mask=None, pair_with=()) -> tuple[float, float, int]:
    """Mean absolute and squared color error of the reference reprojected by ``depth``.

    Every reference pixel is lifted at its depth, moved into each query and
    compared with the bilinear query color; per-sample errors average the
    three channels. Points leaving a query image are excluded. Depths in
    ``pair_with`` contribute their exclusion masks so that several depth
    maps are scored on one shared sample set. Returns ``(mae, mse, count)``.
    """
    d = _depth_plane(depth)
    others = [_depth_plane(o) for o in pair_with]
    H, W = bundle.height, bundle.width
    if d.shape != (H, W) or any(o.shape != (H, W) for o in others):
        raise ValueError("depth must match the bundle resolution")
    if len(bundle) < 2:
        raise DegenerateEvalError("photometric error needs at least one query frame")
    pix = np.ones(H * W, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    for z in [d] + others:
        if np.any(z.ravel()[pix] <= 0) or not np.all(np.isfinite(z.ravel()[pix])):
            raise InvalidDepthError("depth must be positive and finite on the evaluated pixels")
    ref_rgb = bundle.reference.image.data.reshape(-1, 3).astype(np.float64)
    s_abs = 0.0
    s_sq = 0.0
    count = 0
    for q in range(1, len(bundle)):
        x, ok = _query_hits(d, bundle, q)
        ok &= pix
        for o in others:
            ok &= _query_hits(o, bundle, q)[1]
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        col = _kernels.bilinear(bundle.frames[q].image.data, x[idx, 0], x[idx, 1])
        diff = col - ref_rgb[idx]
        s_abs += float(np.sum(np.abs(diff))) / 3.0
        s_sq += float(np.sum(diff * diff)) / 3.0
        count += len(idx)
    if count == 0:
        raise DegenerateEvalError("no reprojected point lands inside any query image")
    return s_abs / count, s_sq / count, count


def depth_metrics(depth, gt_depth, mask=None) -> tuple[float, float]:
    """Masked ``(MAE, RMSE)`` in metres."""
    d = _depth_plane(depth)
    g = _depth_plane(gt_depth)
    if d.shape != g.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {g.shape}")
    m = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != d.shape:
        raise ValueError("mask shape does not match depth")
    if not np.any(m):
        raise EmptyMaskError("evaluation mask selects no pixels")
    e = d[m] - g[m]
    return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e)))


def expected_disparity(fx: float, baseline: float, z: float, feature: float) -> float:
    """Pixel shift between a point and one ``feature`` metres behind it."""
    if z <= 0 or z + feature <= 0:
        raise ValueError("depths must be positive")
    return fx * baseline * (1.0 / z - 1.0 / (z + feature))


def depth_to_normals(depth, K: Intrinsics, encode: bool = True) -> ImageGrid:
    """Camera-facing unit normals from central-difference tangents.

    Normals point toward the camera (negative z). With ``encode`` the
    result is mapped to ``(n + 1) / 2``. Degenerate pixels copy the nearest
    valid normal.
    """
    d = _depth_plane(depth)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise InvalidDepthError("depth must be positive and finite")
    H, W = d.shape
    X = unproject(pixel_grid(H, W).reshape(-1, 2), d.ravel(), K).reshape(H, W, 3)
    tu = np.gradient(X, axis=1)
    tv = np.gradient(X, axis=0)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=2)
    ok = norm > 1e-15
    if not np.any(ok):
        raise InvalidDepthError("depth map has no non-degenerate neighbourhood")
    n = np.where(ok[:, :, None], n / np.where(ok, norm, 1.0)[:, :, None], 0.0)
    flip = n[:, :, 2] > 0
    n[flip] *= -1.0
    if not np.all(ok):
        _, (iy, ix) = ndimage.distance_transform_edt(~ok, return_indices=True)
        n = n[iy, ix]
    if encode:
        n = (n + 1.0) / 2.0
    return ImageGrid(n, dtype=np.float64)


@dataclass
class EvalReport:
    pe_mae: float
    pe_mse: float
    pe_count: int
    depth_mae: float | None = None
    depth_rmse: float | None = None
    depth_count: int | None = None
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pe_mae", "pe_mse", "depth_mae", "depth_rmse"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be >= 0")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "config":
                v = json.dumps(v, sort_keys=True)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition(": ")
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown report key {k!r}")
            if k == "config":
                kw[k] = json.loads(v)
            elif v == "None":
                kw[k] = None
            elif k in ("pe_count", "depth_count"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


# --------------------------------------------------------------------------
# image export
# --------------------------------------------------------------------------


def write_pfm(path, data) -> None:
    """Little-endian PFM (negative scale); rows stored bottom-up."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM holds 1 or 3 channels")
    H, W = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{W} {H}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        W, H = map(int, fh.readline().split())
        scale = float(fh.readline())
        ch = 3 if tag == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        a = np.frombuffer(fh.read(), dtype=dt, count=H * W * ch)
    shape = (H, W, 3) if ch == 3 else (H, W)
    return a.reshape(shape)[::-1].astype(np.float32)


def write_png(path, rgb01) -> None:
    from PIL import Image

    a = np.clip(np.asarray(rgb01, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)
