"""Positional encoding, the coordinate MLP, hand-written backprop and Adam."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BundleFormatError, TruncatedBlobError, VersionMismatchError

HIDDEN = 256
N_LAYERS = 4


def input_dim(n_freqs: int) -> int:
    return 6 * n_freqs + 3


def positional_encode(p, n_freqs: int) -> np.ndarray:
    """``[sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(...)]``.

    ``p`` may be a scalar or an array; the encoding is appended as a last
    axis of length ``2 * n_freqs``.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    arg = p[..., None] * (np.pi * 2.0 ** np.arange(n_freqs))
    out = np.empty(p.shape + (2 * n_freqs,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def encode_points(X, rgb, n_freqs: int, scene_scale: float = 1.0) -> np.ndarray:
    """Colored-point encoding ``[g(x), g(y), g(z), r, g, b]`` for ``(n, 3)`` inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64)) / scene_scale
    rgb = np.atleast_2d(np.asarray(rgb, dtype=np.float64))
    n = X.shape[0]
    out = np.empty((n, input_dim(n_freqs)))
    L2 = 2 * n_freqs
    for axis in range(3):
        out[:, axis * L2:(axis + 1) * L2] = positional_encode(X[:, axis], n_freqs)
    out[:, 3 * L2:] = rgb
    return out


def encode_point(X, rgb, n_freqs: int, scene_scale: float = 1.0) -> np.ndarray:
    return encode_points(np.asarray(X)[None, :3], np.asarray(rgb)[None], n_freqs, scene_scale)[0]


@dataclass
class MlpParams:
    """Dense layers ``in -> 256 -> 256 -> 256 -> 1``; ReLU between, linear out.

    ``weights[i]`` has shape ``(fan_in, fan_out)``.
    """

    weights: list
    biases: list
    n_freqs: int = 6
    seed: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.n_freqs, self.seed)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_params(seed: int, n_freqs: int = 6, hidden: int = HIDDEN, final_bias: float = 0.0) -> MlpParams:
    """He-uniform hidden layers, zero biases, all-zero output layer.

    ``final_bias`` lets the direct-depth ablation start from a constant.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim(n_freqs), hidden, hidden, hidden, 1]
    weights, biases = [], []
    for i in range(N_LAYERS):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i < N_LAYERS - 1:
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        else:
            weights.append(np.zeros((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1][:] = final_bias
    return MlpParams(weights, biases, n_freqs, seed)


def mlp_forward(params: MlpParams, x, dtype=np.float64):
    """Returns ``(out (n,), cache)``; ``cache`` holds every layer input.

    ``dtype`` is the arithmetic precision; parameters stay float64 and are
    cast per call. The output is always float64.
    """
    a = np.atleast_2d(np.asarray(x, dtype=dtype))
    cache = [a]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.astype(dtype, copy=False)
        z += b.astype(dtype, copy=False)
        if i < last:
            np.maximum(z, 0.0, out=z)
            cache.append(z)
        a = z
    return a[:, 0].astype(np.float64), cache


def mlp_backward(params: MlpParams, cache, upstream, need_input_grad: bool = False):
    """Backprop ``d loss / d out`` (shape ``(n,)``) through the network.

    Returns ``(grads, input_grad)`` where ``grads`` follows
    :meth:`MlpParams.arrays` order. Gradients are summed over the batch.
    """
    dtype = cache[0].dtype
    g = np.asarray(upstream, dtype=dtype).reshape(-1, 1)
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        a_in = cache[i]
        grads[2 * i] = (a_in.T @ g).astype(np.float64)
        grads[2 * i + 1] = g.sum(axis=0, dtype=np.float64)
        if i == 0 and not need_input_grad:
            break
        g = g @ params.weights[i].T.astype(dtype, copy=False)
        if i > 0:
            # cache[i] is the post-ReLU activation; zero where the unit was off
            g *= cache[i] > 0
    return grads, (g.astype(np.float64) if need_input_grad else None)


def lr_at_epoch(base: float, decay: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay**epoch


@dataclass
class AdamState:
    """Adam moments for a list of parameter arrays."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, params: list, grads: list, lrs) -> None:
    """In-place bias-corrected Adam update.

    ``lrs`` is one learning rate or one per array.
    """
    if np.isscalar(lrs):
        lrs = [lrs] * len(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v, lr in zip(params, grads, state.m, state.v, lrs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

CKPT_MAGIC = b"MBCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIII")


def save_checkpoint(params: MlpParams, path) -> None:
    """Little-endian: magic, version, L, n_dims, dims (u32 each), seed (i64),
    then W0, b0, W1, b1, ... as float64, weights row-major ``(fan_in, fan_out)``."""
    dims = params.dims
    buf = bytearray(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.n_freqs, len(dims)))
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += struct.pack("<q", int(params.seed))
    for a in params.arrays():
        buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise TruncatedBlobError(f"{path}: checkpoint header truncated")
    magic, version, n_freqs, n_dims = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise BundleFormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = _CKPT_HEAD.size
    if len(raw) < off + 4 * n_dims + 8:
        raise TruncatedBlobError(f"{path}: checkpoint header truncated")
    dims = struct.unpack_from(f"<{n_dims}I", raw, off)
    off += 4 * n_dims
    (seed,) = struct.unpack_from("<q", raw, off)
    off += 8
    expected = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(n_dims - 1))
    if len(raw) - off != 8 * expected:
        raise TruncatedBlobError(f"{path}: expected {expected} parameters, found {(len(raw) - off) // 8}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    weights, biases = [], []
    pos = 0
    for i in range(n_dims - 1):
        nw = dims[i] * dims[i + 1]
        weights.append(flat[pos:pos + nw].reshape(dims[i], dims[i + 1]).copy())
        pos += nw
        biases.append(flat[pos:pos + dims[i + 1]].copy())
        pos += dims[i + 1]
    return MlpParams(weights, biases, n_freqs, seed)
