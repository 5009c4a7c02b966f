"""Differentiable image kernels on NCHW tensors.

Every function takes and returns :class:`~docdewarp.nn.tensor.Tensor` and
registers a backward closure when any input requires a gradient.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from docdewarp.errors import DimensionError, NumericError
from docdewarp.nn.tensor import Tensor, make_result

ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(C*k*k, N*ho*wo)`` patch matrix, batch folded into columns."""
    n, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(xt).reshape(c, n * ho * wo)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to ``(N, C, H, W)``."""
    n, c, h, w = shape
    if k == 1 and stride == 1 and padding == 0:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.

    Output spatial size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv weight must be (out, in, k, k), got {weight.shape}")
    out_ch, in_ch, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {in_ch}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (out_ch,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({out_ch},)")
    if not np.all(np.isfinite(weight.data)) or (bias is not None and not np.all(np.isfinite(bias.data))):
        raise NumericError("conv2d: non-finite weights")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {padding}")

    cols = _im2col(x.data, k, stride, padding, ho, wo)
    w2 = weight.data.reshape(out_ch, -1).astype(x.dtype, copy=False)
    out = w2 @ cols
    if bias is not None:
        out += bias.data.astype(x.dtype, copy=False)[:, None]
    out = out.reshape(out_ch, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) if n > 1 else out.reshape(n, out_ch, ho, wo)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_ch, n * ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(w2.T @ g2, x.shape, k, stride, padding, ho, wo)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


# -------------------------------------------------------------------- pooling

def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    _require_4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return make_result(out, (x,), backward)


# ----------------------------------------------------------------- resampling

@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D linear resize, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m.astype(dtype_str)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize to ``size = (H_out, W_out)`` with half-pixel centers."""
    _require_4d(x, "resize_bilinear")
    n, c, h, w = x.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    ry = _interp_matrix(h, ho, x.dtype.str)
    rx = _interp_matrix(w, wo, x.dtype.str)
    out = ry @ (x.data @ rx.T)

    def backward(g):
        return (ry.T @ (g @ rx),)

    return make_result(out, (x,), backward)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_bilinear2x")
    return resize_bilinear(x, (2 * x.shape[2], 2 * x.shape[3]))


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def activation(x: Tensor, mode: str) -> Tensor:
    if mode == "relu":
        return relu(x)
    if mode == "sigmoid":
        return sigmoid(x)
    if mode == "tanh":
        return tanh(x)
    if mode == "none":
        return x
    raise ValueError(f"unknown activation {mode!r}; expected one of {ACTIVATIONS}")


# ------------------------------------------------------------ channel algebra

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    for p in parts:
        _require_4d(p, "concat_channels")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: shape {p.shape} incompatible with {ref}")
    if len(parts) == 1:
        return parts[0]
    dtype = parts[0].dtype
    out = np.concatenate([p.data.astype(dtype, copy=False) for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_result(out, tuple(parts), backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    _require_4d(x, "split_channels")
    if sum(sizes) != x.shape[1] or any(s < 1 for s in sizes):
        raise DimensionError(f"split sizes {list(sizes)} do not partition {x.shape[1]} channels")
    if len(sizes) == 1:
        return [x]
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(make_result(x.data[:, lo:hi], (x,), backward))
        start = hi
    return outs


# --------------------------------------------------------------------- losses

def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return make_result(out, (pred,), lambda g: (g * 2.0 * diff / n,))
