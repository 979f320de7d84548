"""Differentiable operations on :class:`~tdam.tensor.Tensor`.

Each op computes its forward value in numpy and registers a closure that maps
the output gradient to gradients of its inputs.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting expanded to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor._from_op(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (the gating multiply)."""
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "mul")


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if b is None:
        raise ValueError(f"elementwise {kind!r} needs two operands")
    if kind == "add":
        return add(a, b)
    if kind in ("mul", "mul_broadcast"):
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reshaping


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def select_rows(candidates: Sequence[Tensor], choice: np.ndarray) -> Tensor:
    """Row ``b`` of the output is row ``b`` of ``candidates[choice[b]]``."""
    stacked = np.stack([c.data for c in candidates])
    rows = np.arange(stacked.shape[1])
    out = stacked[choice, rows]

    def backward(g):
        grads = []
        for t in range(len(candidates)):
            gt = np.zeros_like(g)
            sel = choice == t
            gt[sel] = g[sel]
            grads.append(gt)
        return tuple(grads)

    return Tensor._from_op(out, tuple(candidates), backward, "select_rows")


# ---------------------------------------------------------------- convolution


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weights, got {x.shape} and {w.shape}")
    b, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {i}")
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ValueError("conv2d: kernel >= 1, stride >= 1, pad >= 0 required")
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output size {oh}x{ow} for input {h}x{wd}")
    wm = w.data.reshape(o, -1)

    # per-image columns (B, C*kh*kw, oh*ow) so W @ cols lands directly in NCHW
    pointwise = kh == 1 and kw == 1 and pad == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.reshape(b, c, oh * ow)
    else:
        cols = _kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad, oh, ow).reshape(b, c * kh * kw, oh * ow)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, o, oh, ow)

    def backward(g):
        g3 = g.reshape(b, o, oh * ow)
        gw = None
        if w.requires_grad:
            # per-image products win on large maps, one flat GEMM on tiny ones
            if oh * ow >= 64:
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            else:
                gw = g3.transpose(1, 0, 2).reshape(o, -1) @ cols.transpose(1, 0, 2).reshape(cols.shape[1], -1).T
            gw = gw.reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g3)
            if pointwise:
                gs = dcols.reshape(b, c, oh, ow)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gs
                else:
                    gx = gs
            else:
                gx = _kernels.col2im(dcols.reshape(b, c, kh, kw, oh, ow), h, wd, stride, pad)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, backward, "conv2d")


def pointwise_conv_filter(s: Tensor, x: Tensor) -> Tensor:
    """Use a channel vector as a single 1x1 filter: ``out[b,0] = sum_c s[b,c] x[b,c]``.

    ``s`` is either one vector of length C shared across the batch or a
    (B, C) array with one vector per batch item.
    """
    if x.ndim != 4:
        raise ShapeError(f"pointwise_conv_filter expects a 4D map, got {x.shape}")
    c = x.shape[1]
    if s.shape[-1] != c or s.ndim not in (1, 2) or (s.ndim == 2 and s.shape[0] != x.shape[0]):
        raise ShapeError(f"pointwise_conv_filter: filter shape {s.shape} does not match {c} channels")
    sv = s.data if s.ndim == 2 else np.broadcast_to(s.data, (x.shape[0], c))
    out = np.einsum("bc,bchw->bhw", sv, x.data)[:, None]

    def backward(g):
        gs = gx = None
        if s.requires_grad:
            gs = np.einsum("bhw,bchw->bc", g[:, 0], x.data)
            if s.ndim == 1:
                gs = gs.sum(axis=0)
        if x.requires_grad:
            gx = g * sv[:, :, None, None]
        return gs, gx

    return Tensor._from_op(out, (s, x), backward, "pointwise_conv_filter")


# ---------------------------------------------------------------- pooling


def pool(kind: str, x: Tensor) -> Tensor:
    """Global average or max pooling to (B, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"pool expects a 4D tensor, got {x.shape}")
    b, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        scale = 1.0 / (h * w)
        return Tensor._from_op(
            out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),), "global_avg"
        )
    if kind == "global_max":
        flat = x.data.reshape(b, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(b, c, 1, 1)

        def backward(g):
            gx = np.zeros((b, c, h * w), dtype=x.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(b, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return Tensor._from_op(out, (x,), backward, "global_max")
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    return pool("global_avg", x)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping it as extent 1."""
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(x.dtype),), "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "channel_max")


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    b, c, h, w = x.shape
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small")
    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    vals, idx = _kernels.maxpool(np.ascontiguousarray(xp), k, stride, oh, ow)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        gxp = _kernels.maxpool_backward(np.ascontiguousarray(g), idx, hp, wp, k, stride)
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return Tensor._from_op(vals, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------- dense


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data.T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {w.shape[0]} outputs")
        out = out + bias.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, backward, "linear")


def batchnorm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a (B, C, H, W) tensor.

    Training mode normalizes with batch statistics and updates the running
    arrays in place (unbiased variance for the running estimate).
    """
    if x.ndim != 4 or weight.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} does not match {weight.shape[0]} channels")
    c = x.shape[1]
    xd = np.ascontiguousarray(x.data)
    if training:
        n = xd.size // c
        mean, var = _kernels.bn_stats(xd)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.astype(x.dtype).reshape(1, c, 1, 1)
    out = xhat * weight.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)
    scale = (weight.data * inv).astype(x.dtype)

    def backward(g):
        gx, gw, gb = _kernels.bn_backward(np.ascontiguousarray(g), xhat, scale, training)
        return gx, gw.astype(g.dtype), gb.astype(g.dtype)

    return Tensor._from_op(out, (x, weight, bias), backward, "batchnorm")


# ---------------------------------------------------------------- loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / b),)

    return Tensor._from_op(out, (logits,), backward, "softmax_cross_entropy")
