"""Rigid poses, pinhole intrinsics and projection.

Points are plain ``(..., 3)`` float64 arrays holding ``(x, y, z)``; the
homogeneous ``w`` is implicitly 1 and only materialized by
:func:`homogeneous`. Poses map camera coordinates of a frame into the
reference camera frame, ``X_ref = R @ X + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, InvalidPoseError

Z_MIN = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics of the same camera resampled by ``(sx, sy)``."""
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


@dataclass(frozen=True, eq=False)
class Pose:
    """Affine map ``[R | t]``.

    ``approximate`` marks poses built with the first-order rotation model;
    those skip the orthonormality check.
    """

    rotation: np.ndarray
    translation: np.ndarray
    approximate: bool = False
    _inv: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("pose has non-finite entries")
        if not self.approximate:
            if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise InvalidPoseError("rotation is not orthonormal with det 1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, approximate: bool = False) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], approximate=approximate)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def matrix34(self) -> np.ndarray:
        return self.matrix[:3]

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.matrix - np.eye(4))) <= tol)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


def rodrigues(r) -> np.ndarray:
    """Exact rotation matrix for the axis-angle vector ``r``."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        return np.eye(3) + skew(r)
    k = r / theta
    Kx = skew(k)
    return np.eye(3) + np.sin(theta) * Kx + (1.0 - np.cos(theta)) * (Kx @ Kx)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def small_angle_pose(r, t) -> Pose:
    """First-order pose: ``R = I + [r]_x``. Only valid for ``|r| << 1``."""
    return Pose(np.eye(3) + skew(r), t, approximate=True)


def exact_pose(r, t) -> Pose:
    return Pose(rodrigues(r), t)


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first."""
    return Pose(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
        approximate=a.approximate or b.approximate,
    )


def pose_inverse(p: Pose) -> Pose:
    if p._inv:
        return p._inv[0]
    if p.approximate:
        m = p.matrix
        if abs(np.linalg.det(m)) < 1e-12:
            raise InvalidPoseError("approximate pose is singular")
        inv = Pose.from_matrix(np.linalg.inv(m), approximate=True)
    else:
        rt = p.rotation.T
        inv = Pose(rt, -rt @ p.translation)
    p._inv.append(inv)
    return inv


def transform_point(p: Pose, X) -> np.ndarray:
    """Apply ``p`` to points of shape ``(..., 3)``."""
    X = np.asarray(X, dtype=np.float64)
    return X @ p.rotation.T + p.translation


def homogeneous(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)


def project_valid(X, K: Intrinsics, z_min: float = Z_MIN):
    """Project points, returning ``(uv, valid)``; invalid rows hold NaN."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    valid = z > z_min
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty(X.shape[:-1] + (2,))
    uv[..., 0] = K.fx * X[..., 0] / safe_z + K.cx
    uv[..., 1] = K.fy * X[..., 1] / safe_z + K.cy
    uv[~valid] = np.nan
    return uv, valid


def project(X, K: Intrinsics, z_min: float = Z_MIN) -> np.ndarray:
    uv, valid = project_valid(X, K, z_min)
    if not np.all(valid):
        raise BehindCameraError(f"{int(np.size(valid) - np.count_nonzero(valid))} point(s) at z <= {z_min}")
    return uv


def unproject(uv, z, K: Intrinsics) -> np.ndarray:
    """Lift pixel coordinates ``(..., 2)`` at z-depth ``z`` to camera points."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise InvalidDepthError("unproject requires z > 0")
    out = np.empty(np.broadcast_shapes(uv.shape[:-1], z.shape) + (3,))
    out[..., 0] = z * (uv[..., 0] - K.cx) / K.fx
    out[..., 1] = z * (uv[..., 1] - K.cy) / K.fy
    out[..., 2] = z
    return out


def pixel_rays(K: Intrinsics, uv) -> np.ndarray:
    """Camera-frame directions with unit z through pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.ones(uv.shape[:-1] + (3,))
    d[..., 0] = (uv[..., 0] - K.cx) / K.fx
    d[..., 1] = (uv[..., 1] - K.cy) / K.fy
    return d


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Integer pixel centres as an ``(H, W, 2)`` array of ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)
