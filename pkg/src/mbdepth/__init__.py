"""Depth refinement from the small baseline of handheld tremor.

A short burst of RGB frames with low-resolution depth and camera poses is
turned into a full-resolution reference depth map by fitting a coordinate
MLP offset on top of the averaged depth with a multi-view photometric loss.
"""
from ._kernels import backend
from .bundle import Bundle, Frame
from .geometry import Intrinsics, Pose
from .image import ImageGrid
from .refine import TrainConfig, compute_z_avg, reconstruct, train

__all__ = [
    "Bundle",
    "Frame",
    "ImageGrid",
    "Intrinsics",
    "Pose",
    "TrainConfig",
    "backend",
    "compute_z_avg",
    "reconstruct",
    "train",
]
__version__ = "0.1.0"
