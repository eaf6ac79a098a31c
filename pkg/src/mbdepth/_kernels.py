"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``bilinear``, ``patch_loss`` ...) are bound to the numba
versions unless ``MBDEPTH_DISABLE_NUMBA`` is set to a truthy value or numba
cannot be imported. Both flavours stay importable as ``*_nb`` / ``*_np`` so
tests and the benchmark can compare them directly.

All kernels assume coordinates were bounds-checked by the caller.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MBDEPTH_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _njit(fn):
    if HAVE_NUMBA:
        return _numba.njit(cache=True, nogil=True)(fn)
    return None


# --------------------------------------------------------------------------
# bilinear taps
# --------------------------------------------------------------------------


def _taps_np(size, x):
    i0 = np.clip(np.floor(x), 0, size - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, x - i0


def bilinear_np(img, u, v):
    """Sample ``img`` (H, W, C) at float coords; returns (n, C) float64."""
    H, W = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0, u1, fu = _taps_np(W, u)
    v0, v1, fv = _taps_np(H, v)
    fu = fu[:, None]
    fv = fv[:, None]
    a = img[v0, u0].astype(np.float64)
    b = img[v0, u1].astype(np.float64)
    c = img[v1, u0].astype(np.float64)
    d = img[v1, u1].astype(np.float64)
    return (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)


def bilinear_grad_np(img, u, v):
    """Values and partial derivatives d/du, d/dv, each (n, C)."""
    H, W = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0, u1, fu = _taps_np(W, u)
    v0, v1, fv = _taps_np(H, v)
    fu = fu[:, None]
    fv = fv[:, None]
    a = img[v0, u0].astype(np.float64)
    b = img[v0, u1].astype(np.float64)
    c = img[v1, u0].astype(np.float64)
    d = img[v1, u1].astype(np.float64)
    val = (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)
    du = (1 - fv) * (b - a) + fv * (d - c)
    dv = (1 - fu) * (c - a) + fu * (d - b)
    du[(u1 == u0)] = 0.0
    dv[(v1 == v0)] = 0.0
    return val, du, dv


def _bilinear_nb(img, u, v):
    H, W, C = img.shape
    n = u.shape[0]
    out = np.empty((n, C))
    for i in range(n):
        x = u[i]
        y = v[i]
        u0 = int(np.floor(x))
        v0 = int(np.floor(y))
        u0 = min(max(u0, 0), W - 1)
        v0 = min(max(v0, 0), H - 1)
        u1 = min(u0 + 1, W - 1)
        v1 = min(v0 + 1, H - 1)
        fu = x - u0
        fv = y - v0
        for ch in range(C):
            a = np.float64(img[v0, u0, ch])
            b = np.float64(img[v0, u1, ch])
            c = np.float64(img[v1, u0, ch])
            d = np.float64(img[v1, u1, ch])
            out[i, ch] = (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)
    return out


def _bilinear_grad_nb(img, u, v):
    H, W, C = img.shape
    n = u.shape[0]
    val = np.empty((n, C))
    gu = np.empty((n, C))
    gv = np.empty((n, C))
    for i in range(n):
        x = u[i]
        y = v[i]
        u0 = min(max(int(np.floor(x)), 0), W - 1)
        v0 = min(max(int(np.floor(y)), 0), H - 1)
        u1 = min(u0 + 1, W - 1)
        v1 = min(v0 + 1, H - 1)
        fu = x - u0
        fv = y - v0
        for ch in range(C):
            a = np.float64(img[v0, u0, ch])
            b = np.float64(img[v0, u1, ch])
            c = np.float64(img[v1, u0, ch])
            d = np.float64(img[v1, u1, ch])
            val[i, ch] = (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)
            gu[i, ch] = 0.0 if u1 == u0 else (1 - fv) * (b - a) + fv * (d - c)
            gv[i, ch] = 0.0 if v1 == v0 else (1 - fu) * (c - a) + fu * (d - b)
    return val, gu, gv


# --------------------------------------------------------------------------
# Gaussian patches
# --------------------------------------------------------------------------


def patch_gather_np(img, u, v, du, dv):
    """Bilinear samples at ``(u - du_k, v - dv_k)``; returns (n, T, C)."""
    n = len(u)
    T = len(du)
    uu = (np.asarray(u, dtype=np.float64)[:, None] - du[None, :]).ravel()
    vv = (np.asarray(v, dtype=np.float64)[:, None] - dv[None, :]).ravel()
    return bilinear_np(img, uu, vv).reshape(n, T, img.shape[2])


def _patch_gather_nb(img, u, v, du, dv):
    H, W, C = img.shape
    n = u.shape[0]
    T = du.shape[0]
    out = np.empty((n, T, C))
    for i in range(n):
        for k in range(T):
            x = u[i] - du[k]
            y = v[i] - dv[k]
            u0 = min(max(int(np.floor(x)), 0), W - 1)
            v0 = min(max(int(np.floor(y)), 0), H - 1)
            u1 = min(u0 + 1, W - 1)
            v1 = min(v0 + 1, H - 1)
            fu = x - u0
            fv = y - v0
            for ch in range(C):
                a = np.float64(img[v0, u0, ch])
                b = np.float64(img[v0, u1, ch])
                c = np.float64(img[v1, u0, ch])
                d = np.float64(img[v1, u1, ch])
                out[i, k, ch] = (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)
    return out


def _window_base(x, size, k):
    """Top-left texel of a bilinear window and the shared fraction.

    A coordinate exactly on the last texel is re-expressed as fraction 1 of
    the previous cell so the ``2k + 2`` wide window stays inside the image.
    """
    i0 = np.floor(x).astype(np.int64)
    f = x - i0
    edge = i0 + k + 1 > size - 1
    i0 = np.where(edge, i0 - 1, i0)
    f = np.where(edge, f + 1.0, f)
    return i0 - k, f


def patch_loss_np(img_q, img_r, uq, vq, ur, vr, half_width, wexp, chunk=128):
    """Weighted squared patch difference and its gradient w.r.t. (uq, vq).

    loss_i = sum_k w_k |I_q(xq_i - d_k) - I_r(xr_i - d_k)|^2 over the square
    of integer offsets ``|d| <= half_width``. ``wexp`` holds the weights in
    image order, repeated per channel: shape ``(2K+1, (2K+1) * C)``.
    """
    k = int(half_width)
    S = 2 * k + 1
    C = img_q.shape[2]
    n = len(uq)
    qx, fu = _window_base(np.asarray(uq, dtype=np.float64), img_q.shape[1], k)
    qy, fv = _window_base(np.asarray(vq, dtype=np.float64), img_q.shape[0], k)
    rx, fr = _window_base(np.asarray(ur, dtype=np.float64), img_r.shape[1], k)
    ry, fs = _window_base(np.asarray(vr, dtype=np.float64), img_r.shape[0], k)
    off = np.arange(S + 1)
    wexp = wexp.reshape(S, S, C)
    loss = np.empty(n)
    gu = np.empty(n)
    gv = np.empty(n)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        sl = slice(s, e)
        wq = img_q[(qy[sl, None] + off)[:, :, None], (qx[sl, None] + off)[:, None, :]].astype(np.float64)
        wr = img_r[(ry[sl, None] + off)[:, :, None], (rx[sl, None] + off)[:, None, :]].astype(np.float64)
        a, b, c, d = wq[:, :-1, :-1], wq[:, :-1, 1:], wq[:, 1:, :-1], wq[:, 1:, 1:]
        _fu = fu[sl, None, None, None]
        _fv = fv[sl, None, None, None]
        _fr = fr[sl, None, None, None]
        _fs = fs[sl, None, None, None]
        val = (1 - _fu) * (1 - _fv) * a + _fu * (1 - _fv) * b + (1 - _fu) * _fv * c + _fu * _fv * d
        ref = (
            (1 - _fr) * (1 - _fs) * wr[:, :-1, :-1]
            + _fr * (1 - _fs) * wr[:, :-1, 1:]
            + (1 - _fr) * _fs * wr[:, 1:, :-1]
            + _fr * _fs * wr[:, 1:, 1:]
        )
        wd = wexp[None] * (val - ref)
        loss[sl] = np.sum(wd * (val - ref), axis=(1, 2, 3))
        gu[sl] = 2.0 * np.sum(wd * ((1 - _fv) * (b - a) + _fv * (d - c)), axis=(1, 2, 3))
        gv[sl] = 2.0 * np.sum(wd * ((1 - _fu) * (c - a) + _fu * (d - b)), axis=(1, 2, 3))
    return loss, gu, gv


def _patch_loss_nb(img_q, img_r, uq, vq, ur, vr, half_width, wexp):
    k = half_width
    H, W, C = img_q.shape
    Hr, Wr, _ = img_r.shape
    q2 = img_q.reshape(H, W * C)
    r2 = img_r.reshape(Hr, Wr * C)
    S = 2 * k + 1
    L = S * C
    n = uq.shape[0]
    loss = np.zeros(n)
    gu = np.zeros(n)
    gv = np.zeros(n)
    for i in range(n):
        qu0 = int(np.floor(uq[i]))
        fu = uq[i] - qu0
        if qu0 + k + 1 > W - 1:
            qu0 -= 1
            fu += 1.0
        qv0 = int(np.floor(vq[i]))
        fv = vq[i] - qv0
        if qv0 + k + 1 > H - 1:
            qv0 -= 1
            fv += 1.0
        ru0 = int(np.floor(ur[i]))
        fr = ur[i] - ru0
        if ru0 + k + 1 > Wr - 1:
            ru0 -= 1
            fr += 1.0
        rv0 = int(np.floor(vr[i]))
        fs = vr[i] - rv0
        if rv0 + k + 1 > Hr - 1:
            rv0 -= 1
            fs += 1.0
        w00 = (1 - fu) * (1 - fv)
        w01 = fu * (1 - fv)
        w10 = (1 - fu) * fv
        w11 = fu * fv
        r00 = (1 - fr) * (1 - fs)
        r01 = fr * (1 - fs)
        r10 = (1 - fr) * fs
        r11 = fr * fs
        qc = (qu0 - k) * C
        rc = (ru0 - k) * C
        li = 0.0
        sa = 0.0  # sum wdiff * (b - a)
        sb = 0.0  # sum wdiff * (d - c)
        sc = 0.0  # sum wdiff * (c - a)
        sd = 0.0  # sum wdiff * (d - b)
        for row in range(S):
            q0 = q2[qv0 - k + row]
            q1 = q2[qv0 - k + row + 1]
            p0 = r2[rv0 - k + row]
            p1 = r2[rv0 - k + row + 1]
            wrow = wexp[row]
            for j in range(L):
                a = np.float64(q0[qc + j])
                b = np.float64(q0[qc + j + C])
                c = np.float64(q1[qc + j])
                d = np.float64(q1[qc + j + C])
                val = w00 * a + w01 * b + w10 * c + w11 * d
                ref = (
                    r00 * np.float64(p0[rc + j])
                    + r01 * np.float64(p0[rc + j + C])
                    + r10 * np.float64(p1[rc + j])
                    + r11 * np.float64(p1[rc + j + C])
                )
                diff = val - ref
                wdiff = wrow[j] * diff
                li += wdiff * diff
                sa += wdiff * (b - a)
                sb += wdiff * (d - c)
                sc += wdiff * (c - a)
                sd += wdiff * (d - b)
        loss[i] = li
        gu[i] = 2.0 * ((1 - fv) * sa + fv * sb)
        gv[i] = 2.0 * ((1 - fu) * sc + fu * sd)
    return loss, gu, gv


def expand_weights(weights, half_width, channels):
    """Kernel weights (dv-major, du-minor offsets) laid out in image order."""
    S = 2 * half_width + 1
    w = np.asarray(weights, dtype=np.float64).reshape(S, S)[::-1, ::-1]
    return np.ascontiguousarray(np.repeat(w, channels, axis=1))


# --------------------------------------------------------------------------
# scatter / splat
# --------------------------------------------------------------------------


def splat_np(height, width, u, v, val):
    """Bilinear splat of scalars; returns (accumulated value, accumulated weight)."""
    acc = np.zeros(height * width)
    wsum = np.zeros(height * width)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    for dy, dx, wt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, fu * (1 - fv)),
        (1, 0, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        uu = u0 + dx
        vv = v0 + dy
        ok = (uu >= 0) & (uu < width) & (vv >= 0) & (vv < height) & (wt > 0)
        idx = vv[ok] * width + uu[ok]
        acc += np.bincount(idx, weights=wt[ok] * val[ok], minlength=height * width)
        wsum += np.bincount(idx, weights=wt[ok], minlength=height * width)
    return acc.reshape(height, width), wsum.reshape(height, width)


def _splat_nb(height, width, u, v, val):
    acc = np.zeros((height, width))
    wsum = np.zeros((height, width))
    for i in range(u.shape[0]):
        u0 = int(np.floor(u[i]))
        v0 = int(np.floor(v[i]))
        fu = u[i] - u0
        fv = v[i] - v0
        for dy in range(2):
            for dx in range(2):
                uu = u0 + dx
                vv = v0 + dy
                wt = (fu if dx else 1 - fu) * (fv if dy else 1 - fv)
                if wt > 0 and uu >= 0 and uu < width and vv >= 0 and vv < height:
                    acc[vv, uu] += wt * val[i]
                    wsum[vv, uu] += wt
    return acc, wsum


# --------------------------------------------------------------------------
# median filter
# --------------------------------------------------------------------------


def median5_np(a):
    """5x5 median; border pixels use the in-bounds part of the window."""
    a = np.asarray(a, dtype=np.float64)
    p = np.pad(a, 2, mode="constant", constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(p, (5, 5))
    return np.nanmedian(win.reshape(a.shape + (25,)), axis=-1)


def _median5_nb(a):
    H, W = a.shape
    out = np.empty((H, W))
    buf = np.empty(25)
    for y in range(H):
        for x in range(W):
            n = 0
            for dy in range(-2, 3):
                yy = y + dy
                if yy < 0 or yy >= H:
                    continue
                for dx in range(-2, 3):
                    xx = x + dx
                    if xx < 0 or xx >= W:
                        continue
                    buf[n] = a[yy, xx]
                    n += 1
            s = np.sort(buf[:n])
            if n % 2 == 1:
                out[y, x] = s[n // 2]
            else:
                out[y, x] = 0.5 * (s[n // 2 - 1] + s[n // 2])
    return out


def _njit_fast(fn):
    if HAVE_NUMBA:
        return _numba.njit(cache=True, nogil=True, fastmath=True)(fn)
    return None


bilinear_nb = _njit(_bilinear_nb)
bilinear_grad_nb = _njit(_bilinear_grad_nb)
patch_gather_nb = _njit(_patch_gather_nb)
patch_loss_nb = _njit_fast(_patch_loss_nb)
splat_nb = _njit(_splat_nb)
median5_nb = _njit(_median5_nb)


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


if USE_NUMBA:

    def bilinear(img, u, v):
        return bilinear_nb(img, _f64(u), _f64(v))

    def bilinear_grad(img, u, v):
        return bilinear_grad_nb(img, _f64(u), _f64(v))

    def patch_gather(img, u, v, du, dv):
        return patch_gather_nb(img, _f64(u), _f64(v), _f64(du), _f64(dv))

    def patch_loss(img_q, img_r, uq, vq, ur, vr, half_width, wexp):
        return patch_loss_nb(
            np.ascontiguousarray(img_q), np.ascontiguousarray(img_r),
            _f64(uq), _f64(vq), _f64(ur), _f64(vr), int(half_width), _f64(wexp),
        )

    def splat(height, width, u, v, val):
        return splat_nb(int(height), int(width), _f64(u), _f64(v), _f64(val))

    def median5(a):
        return median5_nb(_f64(a))

else:
    bilinear = bilinear_np
    bilinear_grad = bilinear_grad_np
    patch_gather = patch_gather_np
    patch_loss = patch_loss_np
    splat = splat_np
    median5 = median5_np


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
