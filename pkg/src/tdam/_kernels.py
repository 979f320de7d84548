"""Hot loops: patch extraction for convolution, batch-norm reductions, max pooling,
component labeling.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The numba path is used when numba imports and ``TDAM_DISABLE_NUMBA`` is unset
(or ``0``). Both paths produce identical results; ``set_backend`` switches at
runtime so the benchmark and the tests can compare them.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_DISABLED = os.environ.get("TDAM_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")


# --------------------------------------------------------------------- numpy


def _span(p, pad, stride, n, size):
    """Output index range [lo, hi) whose tap p lands inside the unpadded input."""
    lo = max(0, -(-(pad - p) // stride))
    hi = min(n, (size - 1 + pad - p) // stride + 1)
    return lo, max(lo, hi)


def im2col_numpy(x, kh, kw, stride, pad, oh, ow):
    """Patches of a (B, C, H, W) array, zero padded by ``pad``, as (B, C, kh, kw, oh, ow)."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for p in range(kh):
        i0, i1 = _span(p, pad, stride, oh, h)
        for q in range(kw):
            j0, j1 = _span(q, pad, stride, ow, w)
            r0, c0 = i0 * stride + p - pad, j0 * stride + q - pad
            out[:, :, p, q, i0:i1, j0:j1] = x[:, :, r0 : r0 + stride * (i1 - i0) : stride, c0 : c0 + stride * (j1 - j0) : stride]
    return out


def col2im_numpy(cols, h, w, stride, pad):
    """Adjoint of :func:`im2col_numpy`; overlapping patches are summed."""
    b, c, kh, kw, oh, ow = cols.shape
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for p in range(kh):
        i0, i1 = _span(p, pad, stride, oh, h)
        for q in range(kw):
            j0, j1 = _span(q, pad, stride, ow, w)
            r0, c0 = i0 * stride + p - pad, j0 * stride + q - pad
            out[:, :, r0 : r0 + stride * (i1 - i0) : stride, c0 : c0 + stride * (j1 - j0) : stride] += cols[:, :, p, q, i0:i1, j0:j1]
    return out


def bn_stats_numpy(x):
    """Per-channel mean and biased variance of (B, C, H, W), accumulated in float64."""
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def bn_backward_numpy(g, xhat, scale, training):
    """Input gradient of batch norm given ``scale = gamma / sqrt(var + eps)``.

    Also returns the per-channel sums of g and g * xhat (the bias and weight grads).
    """
    gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
    gw = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    s = scale.reshape(1, -1, 1, 1)
    if training:
        m = g.size // g.shape[1]
        gx = s * (g - (gb / m).astype(g.dtype).reshape(1, -1, 1, 1) - xhat * (gw / m).astype(g.dtype).reshape(1, -1, 1, 1))
    else:
        gx = g * s
    return gx.astype(g.dtype, copy=False), gw, gb


def maxpool_numpy(xp, k, stride, oh, ow):
    """Max over k x k windows of a padded array; returns (values, flat argmax within window)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(vals), idx.astype(np.int64)


def maxpool_backward_numpy(g, idx, hp, wp, k, stride):
    b, c, oh, ow = g.shape
    out = np.zeros((b, c, hp, wp), dtype=g.dtype)
    rows = (np.arange(oh) * stride)[None, None, :, None] + idx // k
    cols = (np.arange(ow) * stride)[None, None, None, :] + idx % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(out, (np.broadcast_to(bi, g.shape), np.broadcast_to(ci, g.shape), rows, cols), g)
    return out


_FOUR = ndimage.generate_binary_structure(2, 1)


def label_numpy(mask):
    """4-connected component labels (0 = background) and component count."""
    labels, n = ndimage.label(mask, structure=_FOUR)
    return labels.astype(np.int32), int(n)


# --------------------------------------------------------------------- numba

if HAS_NUMBA:

    @njit(cache=True)
    def im2col_numba(x, kh, kw, stride, pad, oh, ow):
        b_n, c_n, h, w = x.shape
        out = np.empty((b_n, c_n, kh, kw, oh, ow), dtype=x.dtype)
        for b in range(b_n):
            for c in range(c_n):
                for p in range(kh):
                    for q in range(kw):
                        for i in range(oh):
                            r = i * stride + p - pad
                            if r < 0 or r >= h:
                                out[b, c, p, q, i, :] = 0
                                continue
                            for j in range(ow):
                                col = j * stride + q - pad
                                out[b, c, p, q, i, j] = x[b, c, r, col] if 0 <= col < w else 0
        return out

    @njit(cache=True)
    def col2im_numba(cols, h, w, stride, pad):
        b_n, c_n, kh, kw, oh, ow = cols.shape
        out = np.zeros((b_n, c_n, h, w), dtype=cols.dtype)
        for b in range(b_n):
            for c in range(c_n):
                for p in range(kh):
                    for q in range(kw):
                        for i in range(oh):
                            r = i * stride + p - pad
                            if r < 0 or r >= h:
                                continue
                            for j in range(ow):
                                col = j * stride + q - pad
                                if 0 <= col < w:
                                    out[b, c, r, col] += cols[b, c, p, q, i, j]
        return out

    @njit(cache=True)
    def bn_stats_numba(x):
        b_n, c_n, h, w = x.shape
        m = b_n * h * w
        mean = np.zeros(c_n)
        var = np.zeros(c_n)
        for c in range(c_n):
            acc = 0.0
            for b in range(b_n):
                for i in range(h):
                    for j in range(w):
                        acc += x[b, c, i, j]
            mu = acc / m
            acc = 0.0
            for b in range(b_n):
                for i in range(h):
                    for j in range(w):
                        d = x[b, c, i, j] - mu
                        acc += d * d
            mean[c] = mu
            var[c] = acc / m
        return mean, var

    @njit(cache=True)
    def bn_backward_numba(g, xhat, scale, training):
        b_n, c_n, h, w = g.shape
        m = b_n * h * w
        gb = np.zeros(c_n)
        gw = np.zeros(c_n)
        gx = np.empty_like(g)
        for c in range(c_n):
            s1 = 0.0
            s2 = 0.0
            for b in range(b_n):
                for i in range(h):
                    for j in range(w):
                        s1 += g[b, c, i, j]
                        s2 += g[b, c, i, j] * xhat[b, c, i, j]
            gb[c] = s1
            gw[c] = s2
            sc = scale[c]
            if training:
                k1 = s1 / m
                k2 = s2 / m
                for b in range(b_n):
                    for i in range(h):
                        for j in range(w):
                            gx[b, c, i, j] = sc * (g[b, c, i, j] - k1 - xhat[b, c, i, j] * k2)
            else:
                for b in range(b_n):
                    for i in range(h):
                        for j in range(w):
                            gx[b, c, i, j] = sc * g[b, c, i, j]
        return gx, gw, gb

    @njit(cache=True)
    def maxpool_numba(xp, k, stride, oh, ow):
        b_n, c_n = xp.shape[0], xp.shape[1]
        vals = np.empty((b_n, c_n, oh, ow), dtype=xp.dtype)
        idx = np.empty((b_n, c_n, oh, ow), dtype=np.int64)
        for b in range(b_n):
            for c in range(c_n):
                for i in range(oh):
                    for j in range(ow):
                        best = xp[b, c, i * stride, j * stride]
                        arg = 0
                        for p in range(k):
                            for q in range(k):
                                v = xp[b, c, i * stride + p, j * stride + q]
                                if v > best:
                                    best = v
                                    arg = p * k + q
                        vals[b, c, i, j] = best
                        idx[b, c, i, j] = arg
        return vals, idx

    @njit(cache=True)
    def maxpool_backward_numba(g, idx, hp, wp, k, stride):
        b_n, c_n, oh, ow = g.shape
        out = np.zeros((b_n, c_n, hp, wp), dtype=g.dtype)
        for b in range(b_n):
            for c in range(c_n):
                for i in range(oh):
                    for j in range(ow):
                        a = idx[b, c, i, j]
                        out[b, c, i * stride + a // k, j * stride + a % k] += g[b, c, i, j]
        return out

    @njit(cache=True)
    def _label_numba(mask):
        h, w = mask.shape
        labels = np.zeros((h, w), dtype=np.int32)
        stack = np.empty(h * w, dtype=np.int64)
        n = 0
        for y0 in range(h):
            for x0 in range(w):
                if not mask[y0, x0] or labels[y0, x0] != 0:
                    continue
                n += 1
                labels[y0, x0] = n
                top = 0
                stack[top] = y0 * w + x0
                top += 1
                while top > 0:
                    top -= 1
                    pos = stack[top]
                    y = pos // w
                    x = pos % w
                    if y > 0 and mask[y - 1, x] and labels[y - 1, x] == 0:
                        labels[y - 1, x] = n
                        stack[top] = pos - w
                        top += 1
                    if y < h - 1 and mask[y + 1, x] and labels[y + 1, x] == 0:
                        labels[y + 1, x] = n
                        stack[top] = pos + w
                        top += 1
                    if x > 0 and mask[y, x - 1] and labels[y, x - 1] == 0:
                        labels[y, x - 1] = n
                        stack[top] = pos - 1
                        top += 1
                    if x < w - 1 and mask[y, x + 1] and labels[y, x + 1] == 0:
                        labels[y, x + 1] = n
                        stack[top] = pos + 1
                        top += 1
        return labels, n

    def label_numba(mask):
        labels, n = _label_numba(np.ascontiguousarray(mask, dtype=np.bool_))
        return labels, int(n)


# ------------------------------------------------------------------ dispatch

_NAMES = ("im2col", "col2im", "bn_stats", "bn_backward", "maxpool", "maxpool_backward", "label")
backend = ""


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for all subsequent calls."""
    global backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    g = globals()
    for fn in _NAMES:
        g[fn] = g[f"{fn}_{name}"]
    backend = name


def set_num_threads(n: int) -> None:
    if HAS_NUMBA:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


set_backend("numba" if HAS_NUMBA and not _DISABLED else "numpy")
if "TDAM_THREADS" in os.environ:
    set_num_threads(int(os.environ["TDAM_THREADS"]))
