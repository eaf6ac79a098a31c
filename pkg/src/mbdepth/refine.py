"""Test-time optimization of the implicit depth correction.

One training step draws colored points from a query frame, moves them into
the reference camera, asks the MLP for a depth offset (gated by a learned
per-pixel confidence), slides each point along its reference viewing ray by
that offset and compares a Gaussian patch of the query image at the
re-projected location with the reference patch the unrefined point maps to.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels
from .bundle import Bundle, Frame
from .errors import DegenerateBundleError, SamplingStarvationError, TrainingDivergedError
from .geometry import Z_MIN, Intrinsics, Pose, pixel_grid, pose_inverse, project_valid, transform_point, unproject
from .image import ImageGrid, PatchKernel, make_patch_kernel, upsample_bilinear
from .neural import AdamState, MlpParams, adam_step, encode_points, init_params, lr_at_epoch, mlp_backward, mlp_forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    samples: int = 4096
    patch_k: int = 11
    sigma: float | None = None  # None -> (patch_k + 1) / 2
    n_freqs: int = 6
    alpha: float = 0.01
    base_lr: float = 1e-5
    decay: float = 0.985
    epochs: int = 200
    frame_stride: int = 1
    direct_depth: bool = False
    direct_init_depth: float = 0.5
    constant_init_depth: float | None = None
    median_filter_confidence: bool = True
    confidence_lr: float = 1e-3
    scene_scale: float = 1.0
    seed: int = 0
    max_retries: int = 20
    compute_dtype: str = "float32"  # MLP arithmetic during training

    def __post_init__(self):
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")
        if self.samples < 1 or self.patch_k < 0 or self.n_freqs < 1 or self.frame_stride < 1:
            raise ValueError("samples, n_freqs, frame_stride must be positive and patch_k >= 0")
        if self.alpha < 0 or self.epochs < 0:
            raise ValueError("alpha and epochs must be >= 0")
        if self.base_lr <= 0 or self.decay <= 0 or self.scene_scale <= 0 or self.confidence_lr < 0:
            raise ValueError("learning rates, decay and scene_scale must be positive")

    @classmethod
    def no_lidar(cls, **kw) -> "TrainConfig":
        """Depth-free ablation: constant 1 m initialization and no regularizer."""
        kw.setdefault("constant_init_depth", 1.0)
        kw.setdefault("alpha", 0.0)
        return cls(**kw)

    def kernel(self) -> PatchKernel:
        return make_patch_kernel(self.patch_k, self.sigma)


class ConfidenceMap:
    """Per-pixel weight in [0, 1] multiplying the predicted depth offset."""

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("confidence values must lie in [0, 1]")
        self.values = np.ascontiguousarray(v)

    @classmethod
    def ones(cls, height: int, width: int) -> "ConfidenceMap":
        return cls(np.ones((height, width)))

    @property
    def plane(self) -> np.ndarray:
        return self.values[:, :, 0]

    def sample(self, u, v) -> np.ndarray:
        return _kernels.bilinear(self.values, u, v)[:, 0]

    def as_grid(self) -> ImageGrid:
        return ImageGrid(self.values, dtype=np.float64)

    def clamp(self) -> None:
        np.clip(self.values, 0.0, 1.0, out=self.values)

    def median_filter(self) -> None:
        self.values[:, :, 0] = _kernels.median5(self.plane)


@dataclass
class QuerySamples:
    uv: np.ndarray  # (n, 2) continuous query-image coordinates
    z: np.ndarray  # (n,) depth sampled from the query's low-res map
    rgb: np.ndarray  # (n, 3) query color at uv


def sample_depth(frame: Frame, uv):
    """Bilinear low-res depth at RGB coordinates ``uv``; returns ``(z, valid)``.

    A sample is valid only if every contributing depth texel is positive.
    """
    sx, sy = frame.depth_scale
    d = frame.depth.data
    Hd, Wd = d.shape[:2]
    du = np.clip(uv[:, 0] * sx, 0, Wd - 1)
    dv = np.clip(uv[:, 1] * sy, 0, Hd - 1)
    z = _kernels.bilinear(d, du, dv)[:, 0]
    ok = _kernels.bilinear(np.ascontiguousarray((d > 0).astype(np.float32)), du, dv)[:, 0]
    return z, ok >= 1.0 - 1e-9


def draw_query_samples(frame: Frame, count: int, rng, margin: int = 0, max_retries: int = 20) -> QuerySamples:
    """Uniform continuous coordinates at least ``margin`` pixels from the border."""
    W, H = frame.image.width, frame.image.height
    if W - 1 - 2 * margin <= 0 or H - 1 - 2 * margin <= 0:
        raise SamplingStarvationError("image is smaller than the patch footprint")
    uv_parts, z_parts = [], []
    have = 0
    for _ in range(max_retries + 1):
        need = count - have
        uv = np.column_stack([rng.uniform(margin, W - 1 - margin, need), rng.uniform(margin, H - 1 - margin, need)])
        z, ok = sample_depth(frame, uv)
        uv_parts.append(uv[ok])
        z_parts.append(z[ok])
        have += int(ok.sum())
        if have >= count:
            break
    if have < count:
        raise SamplingStarvationError(f"only {have} of {count} samples hit valid depth")
    uv = np.concatenate(uv_parts)[:count]
    z = np.concatenate(z_parts)[:count]
    rgb = _kernels.bilinear(frame.image.data, uv[:, 0], uv[:, 1])
    return QuerySamples(uv, z, rgb)


def to_reference_frame(samples: QuerySamples, pose_q: Pose, K_q: Intrinsics):
    """Query pixels lifted at their depth and mapped into the reference camera.

    Colors travel with the points unchanged.
    """
    X_q = unproject(samples.uv, samples.z, K_q)
    return transform_point(pose_q, X_q), samples.rgb


def refine_points(X_hat, dz):
    """Slide points along their reference viewing ray so z-depth grows by ``dz``."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    return X_hat * ((X_hat[:, 2] + dz) / X_hat[:, 2])[:, None]


def predict_correction(params: MlpParams, confidence: ConfidenceMap, X_hat, rgb, K_r: Intrinsics, config: TrainConfig):
    """Confidence-gated depth offset for reference-frame points.

    Returns ``(dz_applied, x_r, valid)``; rows whose reference projection
    falls outside the confidence map are invalid and hold NaN.
    """
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    x_r, valid = project_valid(X_hat, K_r)
    H, W = confidence.plane.shape
    valid &= (x_r[:, 0] >= 0) & (x_r[:, 0] <= W - 1) & (x_r[:, 1] >= 0) & (x_r[:, 1] <= H - 1)
    dz = np.full(len(X_hat), np.nan)
    if np.any(valid):
        enc = encode_points(X_hat[valid], np.atleast_2d(rgb)[valid], config.n_freqs, config.scene_scale)
        f, _ = mlp_forward(params, enc)
        c = confidence.sample(x_r[valid, 0], x_r[valid, 1])
        unit = f - X_hat[valid, 2] if config.direct_depth else f
        dz[valid] = c * unit
    return dz, x_r, valid


def resample_in_query(X_f, pose_q: Pose, K_q: Intrinsics, image_q: ImageGrid, kernel: PatchKernel):
    """Re-project refined points into the query and gather their patches.

    Returns ``(x_f, samples (n, T, C), valid)``; invalid rows are zero.
    """
    Y = transform_point(pose_inverse(pose_q), X_f)
    x_f, valid = project_valid(Y, K_q)
    valid &= image_q.in_bounds(x_f[:, 0], x_f[:, 1], margin=kernel.half_width)
    out = np.zeros((len(x_f), kernel.size, image_q.channels))
    if np.any(valid):
        du = kernel.offsets[:, 0].astype(np.float64)
        dv = kernel.offsets[:, 1].astype(np.float64)
        out[valid] = _kernels.patch_gather(image_q.data, x_f[valid, 0], x_f[valid, 1], du, dv)
    return x_f, out, valid


def photometric_loss(image_q: ImageGrid, image_r: ImageGrid, x_f, x_r, kernel: PatchKernel):
    """Gaussian-weighted squared color difference between patches.

    Returns ``(loss (n,), dloss/du_f (n,), dloss/dv_f (n,))``; the reference
    patch is a constant target. Patches must be in bounds.
    """
    x_f = np.atleast_2d(x_f)
    x_r = np.atleast_2d(x_r)
    wexp = _kernels.expand_weights(kernel.weights, kernel.half_width, image_q.channels)
    return _kernels.patch_loss(
        image_q.data, image_r.data, x_f[:, 0], x_f[:, 1], x_r[:, 0], x_r[:, 1], kernel.half_width, wexp
    )


def geometric_regularizer(dz_applied):
    """``|dz|`` and its subgradient (0 at 0)."""
    dz = np.asarray(dz_applied, dtype=np.float64)
    return np.abs(dz), np.sign(dz)


@dataclass
class BatchResult:
    loss: float
    photometric: float
    geometric: float
    n_valid: int
    grads: list | None
    confidence_grad: np.ndarray | None
    dz_applied: np.ndarray  # per valid sample
    valid: np.ndarray  # mask over the input samples


def batch_objective(
    params: MlpParams,
    confidence: ConfidenceMap,
    reference: Frame,
    query: Frame,
    samples: QuerySamples,
    config: TrainConfig,
    kernel: PatchKernel | None = None,
    want_grads: bool = True,
) -> BatchResult:
    """Mean per-sample loss ``photometric + alpha * |dz|`` and its gradients.

    Samples whose patches leave either image, or whose points end up behind
    a camera, are dropped before averaging.
    """
    kernel = kernel or config.kernel()
    Kk = kernel.half_width
    K_q, K_r = query.intrinsics_rgb, reference.intrinsics_rgb
    img_q, img_r = query.image, reference.image
    n = len(samples.z)

    X_hat, rgb = to_reference_frame(samples, query.pose, K_q)
    x_r, ok = project_valid(X_hat, K_r)
    ok &= img_r.in_bounds(x_r[:, 0], x_r[:, 1], margin=Kk)
    idx = np.flatnonzero(ok)
    X_hat, rgb, x_r = X_hat[idx], rgb[idx], x_r[idx]
    z_hat = X_hat[:, 2]

    enc = encode_points(X_hat, rgb, config.n_freqs, config.scene_scale)
    f, cache = mlp_forward(params, enc, dtype=np.dtype(config.compute_dtype))
    c = confidence.sample(x_r[:, 0], x_r[:, 1])
    unit = f - z_hat if config.direct_depth else f
    dz = c * unit

    # refined point and its projection back into the query
    ray = X_hat / z_hat[:, None]
    X_f = X_hat + dz[:, None] * ray
    R, t = query.pose.rotation, query.pose.translation
    Y = (X_f - t) @ R  # R^T (X_f - t)
    dY = ray @ R
    ok2 = (z_hat + dz > Z_MIN) & (Y[:, 2] > Z_MIN)
    Yz = np.where(ok2, Y[:, 2], 1.0)
    u_f = K_q.fx * Y[:, 0] / Yz + K_q.cx
    v_f = K_q.fy * Y[:, 1] / Yz + K_q.cy
    ok2 &= img_q.in_bounds(u_f, v_f, margin=Kk)

    sel = np.flatnonzero(ok2)
    m = len(sel)
    valid = np.zeros(n, dtype=bool)
    valid[idx[sel]] = True
    if m == 0:
        return BatchResult(0.0, 0.0, 0.0, 0, None, None, np.zeros(0), valid)

    wexp = _kernels.expand_weights(kernel.weights, Kk, img_q.channels)
    lp, gu, gv = _kernels.patch_loss(
        img_q.data, img_r.data, u_f[sel], v_f[sel], x_r[sel, 0], x_r[sel, 1], Kk, wexp
    )
    reg, sgn = geometric_regularizer(dz[sel])
    alpha = config.alpha
    loss = float(np.mean(lp + alpha * reg))
    result = BatchResult(loss, float(lp.mean()), float(reg.mean()), m, None, None, dz[sel], valid)
    if not want_grads:
        return result

    Ys, dYs, Yzs = Y[sel], dY[sel], Yz[sel]
    dudz = K_q.fx * (dYs[:, 0] * Yzs - Ys[:, 0] * dYs[:, 2]) / Yzs**2
    dvdz = K_q.fy * (dYs[:, 1] * Yzs - Ys[:, 1] * dYs[:, 2]) / Yzs**2
    dl_ddz = (gu * dudz + gv * dvdz + alpha * sgn) / m

    upstream = np.zeros(len(idx))
    upstream[sel] = dl_ddz * c[sel]
    grads, _ = mlp_backward(params, cache, upstream)

    gc = dl_ddz * unit[sel]
    H, W = confidence.plane.shape
    acc, _ = _kernels.splat(H, W, x_r[sel, 0], x_r[sel, 1], gc)
    result.grads = grads
    result.confidence_grad = acc[:, :, None]
    return result


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_photometric: float
    mean_geometric: float
    mean_total: float
    steps: int = 0
    seconds: float = 0.0

    def line(self) -> str:
        return (
            f"{self.epoch:d}, {self.lr:.9e}, {self.mean_photometric:.9e}, "
            f"{self.mean_geometric:.9e}, {self.mean_total:.9e}"
        )

    @classmethod
    def parse(cls, line: str) -> "EpochLog":
        e, lr, p, g, t = (s.strip() for s in line.split(","))
        return cls(int(e), float(lr), float(p), float(g), float(t))


@dataclass
class TrainResult:
    params: MlpParams
    confidence: ConfidenceMap
    log: list = field(default_factory=list)
    steps_per_epoch: int = 0
    config: TrainConfig | None = None


def prepare_bundle(bundle: Bundle, config: TrainConfig) -> Bundle:
    if config.constant_init_depth is not None:
        return bundle.with_constant_depth(config.constant_init_depth)
    return bundle


def _check_finite(res: BatchResult, epoch: int, step: int, q: int) -> None:
    bad = not np.isfinite(res.loss)
    if res.grads is not None:
        bad = bad or not all(np.all(np.isfinite(g)) for g in res.grads)
        bad = bad or not np.all(np.isfinite(res.confidence_grad))
    if bad:
        raise TrainingDivergedError(
            f"non-finite loss or gradient at epoch {epoch}, step {step}, query frame {q}: "
            f"loss={res.loss}, photometric={res.photometric}, geometric={res.geometric}, valid={res.n_valid}"
        )


def train(bundle: Bundle, config: TrainConfig, log_path=None, progress=None) -> TrainResult:
    """Fit the depth-offset MLP and confidence map to one bundle.

    Each epoch runs one step per stride-filtered query frame, each step on a
    uniformly chosen query. ``log_path`` receives one appended line per epoch.
    """
    bundle = prepare_bundle(bundle, config)
    rng = np.random.default_rng(config.seed)
    final_bias = config.direct_init_depth if config.direct_depth else 0.0
    params = init_params(config.seed, config.n_freqs, final_bias=final_bias)
    confidence = ConfidenceMap.ones(bundle.height, bundle.width)
    queries = bundle.query_indices(config.frame_stride)
    result = TrainResult(params, confidence, [], len(queries), config)
    if config.epochs == 0:
        return result
    if not queries:
        raise DegenerateBundleError("training needs at least one query frame")

    kernel = config.kernel()
    arrays = params.arrays() + [confidence.values]
    adam = AdamState.for_arrays(arrays)
    ref = bundle.reference
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config.base_lr, config.decay, epoch)
        clr = lr_at_epoch(config.confidence_lr, config.decay, epoch)
        lrs = [lr] * (len(arrays) - 1) + [clr]
        sums = np.zeros(3)
        counted = 0
        for step in range(len(queries)):
            q = queries[rng.integers(len(queries))]
            frame = bundle.frames[q]
            samples = draw_query_samples(frame, config.samples, rng, kernel.half_width, config.max_retries)
            res = batch_objective(params, confidence, ref, frame, samples, config, kernel)
            if res.n_valid == 0:
                continue
            _check_finite(res, epoch, step, q)
            adam_step(adam, arrays, res.grads + [res.confidence_grad], lrs)
            confidence.clamp()
            sums += (res.photometric, res.geometric, res.loss)
            counted += 1
        if config.median_filter_confidence:
            confidence.median_filter()
        mean = sums / max(counted, 1)
        entry = EpochLog(epoch, lr, mean[0], mean[1], mean[2], counted, time.perf_counter() - t0)
        result.log.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(entry.line() + "\n")
        if progress is not None:
            progress(entry)
        log.debug("epoch %d: %s (%.1fs)", epoch, entry.line(), entry.seconds)
    return result


def compute_z_avg(bundle: Bundle) -> ImageGrid:
    """Average of every frame's low-res depth reprojected into the reference.

    Each valid depth texel is lifted, moved into the reference camera,
    bilinearly splatted onto the reference depth grid, averaged, hole-filled
    by nearest neighbour and resampled to the RGB resolution.
    """
    Hd, Wd = bundle.depth_shape
    K_ref = bundle.reference.intrinsics_depth
    acc = np.zeros((Hd, Wd))
    wsum = np.zeros((Hd, Wd))
    uv = pixel_grid(Hd, Wd).reshape(-1, 2)
    for frame in bundle.frames:
        z = frame.depth.plane().astype(np.float64).ravel()
        ok = z > 0
        if not np.any(ok):
            continue
        X = transform_point(frame.pose, unproject(uv[ok], z[ok], frame.intrinsics_depth))
        x, front = project_valid(X, K_ref)
        a, w = _kernels.splat(Hd, Wd, x[front, 0], x[front, 1], X[front, 2])
        acc += a
        wsum += w
    filled = wsum > 1e-9
    if not np.any(filled):
        raise DegenerateBundleError("no depth sample lands in the reference view")
    avg = np.where(filled, acc / np.where(filled, wsum, 1.0), 0.0)
    if not np.all(filled):
        _, (iy, ix) = ndimage.distance_transform_edt(~filled, return_indices=True)
        avg = avg[iy, ix]
    return ImageGrid(upsample_bilinear(avg, bundle.height, bundle.width), dtype=np.float64)


def reconstruct(
    params: MlpParams,
    confidence: ConfidenceMap,
    bundle: Bundle,
    z_avg: ImageGrid,
    config: TrainConfig | None = None,
    chunk: int = 16384,
) -> ImageGrid:
    """Evaluate the refined depth on the reference pixel grid."""
    config = config or TrainConfig()
    ref = bundle.reference
    H, W = bundle.height, bundle.width
    z = z_avg.plane().astype(np.float64).ravel()
    uv = pixel_grid(H, W).reshape(-1, 2)
    X = unproject(uv, z, ref.intrinsics_rgb)
    rgb = ref.image.data.reshape(-1, 3).astype(np.float64)
    c = confidence.plane.ravel()
    out = np.empty(H * W)
    for s in range(0, H * W, chunk):
        e = min(s + chunk, H * W)
        f, _ = mlp_forward(params, encode_points(X[s:e], rgb[s:e], config.n_freqs, config.scene_scale))
        unit = f - z[s:e] if config.direct_depth else f
        out[s:e] = z[s:e] + c[s:e] * unit
    return ImageGrid(out.reshape(H, W), dtype=np.float64)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
