"""Dense scalar fields with continuous-coordinate sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import OutOfBoundsError, PatchOutOfBoundsError


class ImageGrid:
    """An ``H x W x C`` field stored row-major, channel-interleaved.

    Values must be finite; holes in depth maps are encoded by a
    non-positive value and tracked with :meth:`valid_mask`.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        a = np.array(data, dtype=dtype)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] < 1:
            raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("ImageGrid values must be finite")
        a.setflags(write=False)
        self.data = a

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def plane(self) -> np.ndarray:
        """Single-channel data as a 2-D array."""
        if self.channels != 1:
            raise ValueError("plane() needs a single-channel grid")
        return self.data[:, :, 0]

    def valid_mask(self) -> np.ndarray:
        return self.data[:, :, 0] > 0

    def in_bounds(self, u, v, margin: float = 0.0) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= margin) & (u <= self.width - 1 - margin) & (v >= margin) & (v <= self.height - 1 - margin)

    def __repr__(self):
        return f"ImageGrid({self.height}x{self.width}x{self.channels}, {self.data.dtype})"


def sample_bilinear(grid: ImageGrid, uv) -> np.ndarray:
    """Bilinear sample at ``uv`` (shape ``(2,)`` or ``(n, 2)``).

    Raises :class:`OutOfBoundsError` for any coordinate outside
    ``[0, W-1] x [0, H-1]``; callers drop such samples instead of clamping.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    if not np.all(grid.in_bounds(uv[:, 0], uv[:, 1])):
        raise OutOfBoundsError("sample coordinate outside the grid")
    out = _kernels.bilinear(grid.data, uv[:, 0], uv[:, 1])
    return out[0] if single else out


@dataclass(frozen=True)
class PatchKernel:
    half_width: int
    sigma: float
    offsets: np.ndarray  # (T, 2) integer (du, dv)
    weights: np.ndarray  # (T,) summing to 1

    @property
    def size(self) -> int:
        return len(self.weights)


def default_sigma(half_width: int) -> float:
    return (half_width + 1) / 2.0


def make_patch_kernel(half_width: int, sigma: float | None = None) -> PatchKernel:
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    if sigma is None:
        sigma = default_sigma(half_width)
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    r = np.arange(-half_width, half_width + 1)
    dv, du = np.meshgrid(r, r, indexing="ij")
    offsets = np.stack([du.ravel(), dv.ravel()], axis=1).astype(np.int64)
    dist2 = (offsets**2).sum(axis=1).astype(np.float64)
    # normal density of the radial distance; the 1/(sigma sqrt(2pi)) factor cancels
    w = np.exp(-0.5 * dist2 / sigma**2)
    w = w / w.sum()
    offsets.setflags(write=False)
    w.setflags(write=False)
    return PatchKernel(half_width, float(sigma), offsets, w)


def sample_patch(grid: ImageGrid, uv, kernel: PatchKernel):
    """Weighted patch around ``uv``: returns ``(weights (T,), samples (T, C))``.

    For a batch ``uv`` of shape ``(n, 2)`` the samples are ``(n, T, C)``.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    if not np.all(grid.in_bounds(uv[:, 0], uv[:, 1], margin=kernel.half_width)):
        raise PatchOutOfBoundsError("patch footprint leaves the grid")
    du = kernel.offsets[:, 0].astype(np.float64)
    dv = kernel.offsets[:, 1].astype(np.float64)
    samples = _kernels.patch_gather(grid.data, uv[:, 0], uv[:, 1], du, dv)
    return kernel.weights, (samples[0] if single else samples)


def median_filter_5x5(grid: ImageGrid) -> ImageGrid:
    if grid.channels != 1:
        raise ValueError("median_filter_5x5 expects a single-channel grid")
    return ImageGrid(_kernels.median5(grid.plane()), dtype=grid.data.dtype)


def upsample_bilinear(low: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample a 2-D array onto an ``height x width`` grid.

    Pixel ``(u, v)`` of the output reads ``low`` at ``(u * w/W, v * h/H)``,
    matching intrinsics scaled by the resolution ratio. Coordinates past the
    last sample are clamped to it.
    """
    h, w = low.shape
    u = np.minimum(np.arange(width) * (w / width), w - 1)
    v = np.minimum(np.arange(height) * (h / height), h - 1)
    uu, vv = np.meshgrid(u, v)
    out = _kernels.bilinear(np.ascontiguousarray(low[:, :, None]), uu.ravel(), vv.ravel())
    return out.reshape(height, width)
