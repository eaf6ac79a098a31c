"""Frames and bundles: the data a refinement run consumes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose
from .image import ImageGrid

FRAME_RATE_HZ = 60.0
MAX_FRAMES = 120


@dataclass(frozen=True)
class Frame:
    image: ImageGrid  # H x W x 3, RGB in [0, 1]
    depth: ImageGrid  # Hd x Wd x 1, metres, <= 0 marks a hole
    pose: Pose  # this camera -> reference camera
    intrinsics_rgb: Intrinsics
    timestamp_ns: int = 0

    @property
    def intrinsics_depth(self) -> Intrinsics:
        return self.intrinsics_rgb.scaled(self.depth.width / self.image.width, self.depth.height / self.image.height)

    @property
    def depth_scale(self) -> tuple[float, float]:
        """Factors mapping RGB pixel coordinates onto depth-map coordinates."""
        return self.depth.width / self.image.width, self.depth.height / self.image.height


@dataclass(frozen=True)
class Bundle:
    """Frames of one capture; ``frames[0]`` is the reference view.

    ``gt_depth`` and ``provenance`` are only filled for synthetic bundles.
    """

    frames: tuple
    gt_depth: ImageGrid | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise ValueError("a bundle needs at least one frame")
        if not frames[0].pose.is_identity():
            raise ValueError("reference frame pose must be the identity")
        f0 = frames[0]
        for f in frames[1:]:
            if f.image.shape != f0.image.shape or f.depth.shape != f0.depth.shape:
                raise ValueError("all frames must share image and depth resolution")
        if f0.image.channels != 3:
            raise ValueError("frames must carry RGB images")
        if self.gt_depth is not None and self.gt_depth.shape[:2] != f0.image.shape[:2]:
            raise ValueError("ground-truth depth must match the RGB resolution")

    def __len__(self):
        return len(self.frames)

    @property
    def reference(self) -> Frame:
        return self.frames[0]

    @property
    def height(self) -> int:
        return self.frames[0].image.height

    @property
    def width(self) -> int:
        return self.frames[0].image.width

    @property
    def depth_shape(self) -> tuple[int, int]:
        d = self.frames[0].depth
        return d.height, d.width

    def query_indices(self, stride: int = 1) -> list[int]:
        """Non-reference frames kept by a frame stride."""
        if stride < 1:
            raise ValueError("stride must be >= 1")
        return list(range(stride, len(self.frames), stride))

    def with_constant_depth(self, depth_m: float) -> "Bundle":
        """Copy with every low-resolution depth map replaced by ``depth_m``."""
        frames = []
        for f in self.frames:
            d = ImageGrid(np.full(f.depth.shape, depth_m, dtype=np.float32))
            frames.append(Frame(f.image, d, f.pose, f.intrinsics_rgb, f.timestamp_ns))
        return Bundle(tuple(frames), self.gt_depth, dict(self.provenance))

    def subset(self, indices) -> "Bundle":
        idx = list(indices)
        if not idx or idx[0] != 0:
            raise ValueError("subset must start with the reference frame")
        return Bundle(tuple(self.frames[i] for i in idx), self.gt_depth, dict(self.provenance))
