"""Synthetic bundles with exact ground truth.

Scenes are ray-cast analytically through the pinhole model of every frame;
camera motion comes from a Brownian hand-tremor model and the low-resolution
depth stream from a box-filtered, noisy, biased copy of the true depth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .bundle import FRAME_RATE_HZ, Bundle, Frame
from .geometry import Intrinsics, Pose, exact_pose, pixel_grid, pixel_rays
from .image import ImageGrid

# Per-axis in-plane step (m/frame) giving a median max displacement of about
# 5.9 mm over 120 frames (Monte-Carlo calibrated, see tests/test_synth.py).
TREMOR_STEP_XY = 3.54e-4
TREMOR_STEP_Z = 1.0e-4
TREMOR_STEP_ROT = 1.0e-4

BACKGROUND_DEPTH = 0.6
DEFAULT_SIZE = (480, 360)
DEFAULT_DEPTH_SIZE = (60, 45)
DEFAULT_FOCAL = 800.0


@dataclass(frozen=True)
class TremorParams:
    n_frames: int = 120
    step_xy: float = TREMOR_STEP_XY
    step_z: float = TREMOR_STEP_Z
    step_rot: float = TREMOR_STEP_ROT
    frame_rate: float = FRAME_RATE_HZ
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if min(self.step_xy, self.step_z, self.step_rot) < 0:
            raise ValueError("tremor step stds must be >= 0")


def simulate_tremor(params: TremorParams) -> list[Pose]:
    """Cumulative Gaussian random walk in translation and rotation.

    Returns exact rigid poses (camera -> reference); pose 0 is the identity.
    """
    rng = np.random.default_rng(params.seed)
    n = params.n_frames
    steps = rng.normal(size=(n - 1, 6))
    steps[:, :2] *= params.step_xy
    steps[:, 2] *= params.step_z
    steps[:, 3:] *= params.step_rot
    path = np.vstack([np.zeros((1, 6)), np.cumsum(steps, axis=0)])
    poses = [Pose.identity()]
    for row in path[1:]:
        poses.append(exact_pose(row[3:], row[:3]))
    return poses


def max_inplane_displacement(poses) -> float:
    t = np.array([p.translation[:2] for p in poses])
    return float(np.max(np.linalg.norm(t - t[0], axis=1)))


# --------------------------------------------------------------------------
# textures
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureSpec:
    """Procedural solid texture evaluated at world hit points.

    kind: ``noise`` (sinusoids + value noise), ``sinusoid``, ``value_noise``,
    ``checker`` or ``flat``. Lengths are in metres.
    """

    kind: str = "noise"
    contrast: float = 0.4
    base: tuple = (0.5, 0.45, 0.4)
    cell: float = 0.004
    wavelengths: tuple = (0.006, 0.011, 0.023)
    period: float = 0.008
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "sinusoid", "value_noise", "checker", "flat"):
            raise ValueError(f"unknown texture kind {self.kind!r}")


_TABLE = 64


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _value_noise(P, cell, table):
    q = P / cell
    i = np.floor(q).astype(np.int64)
    f = _fade(q - i)
    i %= _TABLE
    j = (i + 1) % _TABLE
    out = np.zeros(P.shape[0])
    for cx in (0, 1):
        ix = j[:, 0] if cx else i[:, 0]
        wx = f[:, 0] if cx else 1 - f[:, 0]
        for cy in (0, 1):
            iy = j[:, 1] if cy else i[:, 1]
            wy = f[:, 1] if cy else 1 - f[:, 1]
            for cz in (0, 1):
                iz = j[:, 2] if cz else i[:, 2]
                wz = f[:, 2] if cz else 1 - f[:, 2]
                out += wx * wy * wz * table[ix, iy, iz]
    return out


def evaluate_texture(tex: TextureSpec, P) -> np.ndarray:
    """RGB in [0, 1] at world points ``P`` (n, 3)."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    base = np.asarray(tex.base, dtype=np.float64)
    if tex.kind == "flat":
        return np.broadcast_to(base, (n, 3)).copy()
    rng = np.random.default_rng(tex.seed)
    rgb = np.empty((n, 3))
    for c in range(3):
        t = np.zeros(n)
        if tex.kind in ("noise", "sinusoid"):
            for lam in tex.wavelengths:
                d = rng.normal(size=3)
                d[2] *= 0.3
                d /= np.linalg.norm(d)
                t += np.sin(2 * np.pi * (P @ d) / lam + rng.uniform(0, 2 * np.pi))
            t /= len(tex.wavelengths)
        if tex.kind in ("noise", "value_noise"):
            table = rng.uniform(-1.0, 1.0, size=(_TABLE,) * 3)
            t = t + _value_noise(P, tex.cell, table) if tex.kind == "noise" else _value_noise(P, tex.cell, table)
            if tex.kind == "noise":
                t *= 0.5
        if tex.kind == "checker":
            k = 2 * np.pi / tex.period
            # smoothed edges keep the pattern band-limited for bilinear resampling
            t = np.tanh(3.0 * np.sin(k * P[:, 0]) * np.sin(k * P[:, 1]))
        rgb[:, c] = base[c] + 0.5 * tex.contrast * t
    return np.clip(rgb, 0.0, 1.0)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """A plane, optionally with a sphere or box in front of it.

    The plane is ``z = plane_depth + plane_slope * y`` restricted to
    ``|x| <= plane_half_extent[0]``, ``|y| <= plane_half_extent[1]`` (``None``
    for an unbounded plane). Rays that miss everything see the flat background.
    """

    kind: str = "sphere-on-plane"
    plane_depth: float = 0.40
    plane_slope: float = 0.0
    plane_half_extent: tuple | None = (0.09, 0.065)
    sphere_center: tuple = (0.0, 0.0, 0.36)
    sphere_radius: float = 0.04
    box_center: tuple = (0.0, 0.0, 0.37)
    box_half_size: tuple = (0.03, 0.03, 0.03)
    plane_texture: TextureSpec = field(default_factory=TextureSpec)
    object_texture: TextureSpec = field(default_factory=lambda: TextureSpec(base=(0.55, 0.5, 0.35), seed=1))
    background_depth: float = BACKGROUND_DEPTH
    background_color: tuple = (0.3, 0.32, 0.35)

    def __post_init__(self):
        if self.kind not in ("textured-plane", "sphere-on-plane", "box-on-plane"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        depths = [self.plane_depth]
        if self.kind == "sphere-on-plane":
            depths.append(self.sphere_center[2] - self.sphere_radius)
        if self.kind == "box-on-plane":
            depths.append(self.box_center[2] - self.box_half_size[2])
        if not all(0.1 <= d <= 0.5 for d in depths):
            raise ValueError("scene geometry must lie within 0.1-0.5 m")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("plane_texture", "object_texture"):
            if key in d and isinstance(d[key], dict):
                t = dict(d[key])
                t = {k: tuple(v) if isinstance(v, list) else v for k, v in t.items()}
                d[key] = TextureSpec(**t)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


PRESETS = {
    "sphere-on-plane": lambda: SceneSpec(),
    "textured-plane": lambda: SceneSpec(kind="textured-plane", plane_depth=0.3, plane_half_extent=None),
    "box-on-plane": lambda: SceneSpec(kind="box-on-plane"),
    "checker-plane": lambda: SceneSpec(
        kind="textured-plane",
        plane_depth=0.3,
        plane_half_extent=None,
        plane_texture=TextureSpec(kind="checker", contrast=0.6, period=0.004),
    ),
    "flat-plane": lambda: SceneSpec(
        kind="textured-plane", plane_depth=0.3, plane_half_extent=None, plane_texture=TextureSpec(kind="flat")
    ),
}


def scene_preset(name: str) -> SceneSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}") from None


def _hit_plane(scene, O, D):
    s = scene.plane_slope
    denom = D[:, 2] - s * D[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (scene.plane_depth + s * O[1] - O[2]) / denom
    lam = np.where(np.abs(denom) > 1e-12, lam, np.inf)
    lam = np.where(lam > 0, lam, np.inf)
    if scene.plane_half_extent is not None:
        hx, hy = scene.plane_half_extent
        P = O + np.where(np.isfinite(lam), lam, 0.0)[:, None] * D
        inside = (np.abs(P[:, 0]) <= hx) & (np.abs(P[:, 1]) <= hy)
        lam = np.where(inside, lam, np.inf)
    return lam


def _hit_sphere(scene, O, D):
    c = np.asarray(scene.sphere_center)
    oc = O - c
    a = np.einsum("ij,ij->i", D, D)
    b = 2.0 * (D @ oc)
    cc = oc @ oc - scene.sphere_radius**2
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    lam = (-b - sq) / (2 * a)
    return np.where(ok & (lam > 0), lam, np.inf)


def _hit_box(scene, O, D):
    c = np.asarray(scene.box_center)
    h = np.asarray(scene.box_half_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / D
        t1 = (c - h - O) * inv
        t2 = (c + h - O) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (tmax >= tmin) & (tmin > 0)
    return np.where(ok, tmin, np.inf)


def render_view(scene: SceneSpec, pose: Pose, K: Intrinsics, width: int, height: int):
    """Ray-cast one view. Returns ``(rgb (H,W,3), zdepth (H,W), object_id (H,W))``.

    object_id: 0 background, 1 plane, 2 sphere/box.
    """
    uv = pixel_grid(height, width).reshape(-1, 2)
    D = pixel_rays(K, uv) @ pose.rotation.T  # z-component of the camera-frame ray is 1
    O = pose.translation
    hits = [np.full(len(uv), np.inf), _hit_plane(scene, O, D)]
    if scene.kind == "sphere-on-plane":
        hits.append(_hit_sphere(scene, O, D))
    elif scene.kind == "box-on-plane":
        hits.append(_hit_box(scene, O, D))
    lam = np.stack(hits, axis=1)
    obj = np.argmin(lam, axis=1)
    depth = lam[np.arange(len(uv)), obj]
    rgb = np.empty((len(uv), 3))
    bg = obj == 0
    depth[bg] = scene.background_depth
    rgb[bg] = scene.background_color
    for oid, tex in ((1, scene.plane_texture), (2, scene.object_texture)):
        sel = obj == oid
        if np.any(sel):
            P = O + depth[sel, None] * D[sel]
            rgb[sel] = evaluate_texture(tex, P)
    return rgb.reshape(height, width, 3), depth.reshape(height, width), obj.reshape(height, width)


# --------------------------------------------------------------------------
# low-resolution depth sensor
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LidarModel:
    noise_std: float = 0.005
    bias_amplitude: float = 0.01
    quantization: float | None = None
    bias_seed: int = 0


def _area_weights(n_hi: int, n_lo: int) -> np.ndarray:
    """Row-normalized overlap of low-res pixel footprints with high-res pixels.

    Low-res pixel ``j`` is centred on high-res coordinate ``j * n_hi / n_lo``.
    """
    ratio = n_hi / n_lo
    W = np.zeros((n_lo, n_hi))
    lo_edges = np.arange(n_lo)[:, None] * ratio + np.array([-0.5, 0.5]) * ratio
    hi = np.arange(n_hi)
    for j in range(n_lo):
        a, b = lo_edges[j]
        W[j] = np.clip(np.minimum(hi + 0.5, b) - np.maximum(hi - 0.5, a), 0.0, None)
    return W / W.sum(axis=1, keepdims=True)


def box_downsample(a: np.ndarray, height: int, width: int) -> np.ndarray:
    Ay = _area_weights(a.shape[0], height)
    Ax = _area_weights(a.shape[1], width)
    return Ay @ a @ Ax.T


def bias_field(height: int, width: int, amplitude: float, seed: int, n_waves: int = 4) -> np.ndarray:
    """Smooth random field with max |value| = amplitude."""
    if amplitude == 0:
        return np.zeros((height, width))
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width]
    x = x / max(width - 1, 1)
    y = y / max(height - 1, 1)
    f = np.zeros((height, width))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-1.5, 1.5, size=2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * x + fy * y) + rng.uniform(0, 2 * np.pi))
    f -= f.mean()
    return amplitude * f / np.max(np.abs(f))


def simulate_lidar(gt_depth, height: int, width: int, model: LidarModel = LidarModel(), rng=None) -> ImageGrid:
    """Box-average ``gt_depth`` to ``height x width`` and corrupt it."""
    gt = gt_depth.plane() if isinstance(gt_depth, ImageGrid) else np.asarray(gt_depth, dtype=np.float64)
    if height > gt.shape[0] or width > gt.shape[1]:
        raise ValueError("LiDAR resolution cannot exceed the source resolution")
    rng = np.random.default_rng() if rng is None else rng
    d = box_downsample(gt.astype(np.float64), height, width)
    d = d + bias_field(height, width, model.bias_amplitude, model.bias_seed)
    if model.noise_std > 0:
        d = d + rng.normal(scale=model.noise_std, size=d.shape)
    if model.quantization:
        d = np.round(d / model.quantization) * model.quantization
    return ImageGrid(np.maximum(d, 1e-3).astype(np.float32))


def default_intrinsics(width: int = DEFAULT_SIZE[0], height: int = DEFAULT_SIZE[1]) -> Intrinsics:
    f = DEFAULT_FOCAL * width / DEFAULT_SIZE[0]
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def render_synthetic_bundle(
    scene: SceneSpec,
    tremor: TremorParams,
    size: tuple[int, int] = DEFAULT_SIZE,
    intrinsics: Intrinsics | None = None,
    depth_size: tuple[int, int] = DEFAULT_DEPTH_SIZE,
    lidar: LidarModel | None = None,
    seed: int | None = None,
    poses: list | None = None,
) -> Bundle:
    """Render a bundle; ``size``/``depth_size`` are ``(width, height)``."""
    W, H = size
    Wd, Hd = depth_size
    K = intrinsics or default_intrinsics(W, H)
    seed = tremor.seed if seed is None else seed
    lidar = lidar or LidarModel(bias_seed=seed)
    poses = poses if poses is not None else simulate_tremor(tremor)
    rng = np.random.default_rng([seed, 7])
    frames = []
    gt_ref = None
    for i, pose in enumerate(poses):
        rgb, depth, _ = render_view(scene, pose, K, W, H)
        if i == 0:
            gt_ref = depth
        z = simulate_lidar(depth, Hd, Wd, lidar, rng)
        ts = int(round(i * 1e9 / tremor.frame_rate))
        frames.append(Frame(ImageGrid(rgb.astype(np.float32)), z, pose, K, ts))
    provenance = {
        "generator": "mbdepth.synth",
        "scene": scene.to_dict(),
        "tremor": asdict(tremor),
        "lidar": asdict(lidar),
        "seed": int(seed),
        "lidar_noise_model": "box-average + gaussian + smooth bias field (stand-in)",
    }
    # JSON-normalized so a written and re-read bundle compares equal
    provenance = json.loads(json.dumps(provenance))
    return Bundle(tuple(frames), ImageGrid(gt_ref.astype(np.float32)), provenance)


def textured_mask(bundle: Bundle) -> np.ndarray:
    """Pixels of the reference view that hit textured geometry (not background)."""
    if bundle.gt_depth is None:
        raise ValueError("bundle has no ground truth")
    scene = bundle.provenance.get("scene", {})
    bg = scene.get("background_depth", BACKGROUND_DEPTH)
    mask = bundle.gt_depth.plane() < bg - 1e-6
    return mask


def background_mask(bundle: Bundle) -> np.ndarray:
    return ~textured_mask(bundle)
