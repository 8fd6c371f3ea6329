"""Differentiable operations over :class:`Tensor`.

Image-like tensors use NCHW layout. Linear weights are stored ``[Din, Dout]``
and conv weights ``[Cout, Cin, kh, kw]``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .core import Tensor, as_tensor, make_op


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    out = a.data + b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = a.data - b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        # scalar fast path keeps the dtype of ``a``
        s = float(b)
        return make_op(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),), "mul_scalar")
    out = a.data * b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return make_op(out, (x,), backward, "gelu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# -- reductions --------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis, keepdims) * (1.0 / count)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward, "getitem")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(out, tensors, backward, "concat")


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    n = x.shape[axis] // sections
    idx = [slice(None)] * x.ndim
    parts = []
    for i in range(sections):
        idx[axis] = slice(i * n, (i + 1) * n)
        parts.append(getitem(x, tuple(idx)))
    return parts


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def reflect_pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflect-pad the last two axes (``numpy.pad`` mode 'reflect')."""
    if pad_h == (0, 0) and pad_w == (0, 0):
        return x
    H, W = x.shape[-2:]
    ih = _reflect_index(H, *pad_h)
    iw = _reflect_index(W, *pad_w)
    out = x.data[..., ih[:, None], iw[None, :]]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (Ellipsis, ih[:, None], iw[None, :]), g)
        return (full,)

    return make_op(out, (x,), backward, "reflect_pad2d")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[-2:] == (h, w):
        return x
    return getitem(x, (Ellipsis, slice(0, h), slice(0, w)))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``[Din, Dout]``."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input last dim {x.shape[-1]} != weight Din {din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({dout},)")
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (dout,))

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, backward, "linear")


# -- normalisation / attention primitives -----------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ValueError("layer_norm: gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward, "softmax")


# -- convolution and pixel shuffle ------------------------------------------

def _im2col(xh: np.ndarray, kh: int, kw: int, p: int) -> np.ndarray:
    """NHWC input -> ``[N*Ho*Wo, kh*kw*C]`` patch matrix (tap-major, channel-minor)."""
    if p:
        xh = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
    N, Hp, Wp, C = xh.shape
    cols = sliding_window_view(xh, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(N * (Hp - kh + 1) * (Wp - kw + 1), kh * kw * C)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """2D cross-correlation, stride 1, zero padding.

    ``padding`` defaults to ``(k - 1) // 2`` (same-size output) and then the
    kernel must be odd.
    """
    N, Cin, H, W = x.shape
    Cout, wc, kh, kw = weight.shape
    if wc != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, weight expects {wc}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: same padding needs an odd kernel")
        padding = (kh - 1) // 2
    if bias is not None and bias.shape != (Cout,):
        raise ValueError("conv2d: bias shape mismatch")
    p = padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1

    if kh == 1 and kw == 1 and p == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, Cin)
    else:
        cols = _im2col(x.data.transpose(0, 2, 3, 1), kh, kw, p)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(Cout, -1)
    w2t = np.ascontiguousarray(w2.T)
    # one GEMM per sample: BLAS may round a row differently depending on how
    # many rows share the call, and per-sample calls keep outputs batch-invariant
    rows = Ho * Wo
    out = np.empty((N * rows, Cout), dtype=np.result_type(cols, w2t))
    for n in range(N):
        np.matmul(cols[n * rows:(n + 1) * rows], w2t, out=out[n * rows:(n + 1) * rows])
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        gt = gh.reshape(-1, Cout)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gt.T @ cols).reshape(Cout, kh, kw, Cin).transpose(0, 3, 1, 2))
        gb = gt.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1 and p == 0:
                gxh = (gt @ w2).reshape(N, H, W, Cin)
            else:
                # full correlation of the output gradient with the flipped kernel
                wf = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, Cin)
                gcols = _im2col(gh, kh, kw, kh - 1)
                gxh = (gcols @ wf).reshape(N, Ho + kh - 1, Wo + kw - 1, Cin)[:, p:p + H, p:p + W, :]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, backward, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``[N, C*r*r, H, W] -> [N, C, H*r, W*r]``; channel ``c*r*r + i*r + j`` lands at offset (i, j)."""
    N, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ValueError(f"pixel_shuffle: {Cr} channels not divisible by {r}^2")
    C = Cr // (r * r)
    y = reshape(x, (N, C, r, r, H, W))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (N, C, H * r, W * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse reindexing of :func:`pixel_shuffle`."""
    N, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ValueError("pixel_unshuffle: spatial size not divisible by r")
    H, W = Hr // r, Wr // r
    y = reshape(x, (N, C, H, r, W, r))
    y = permute(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (N, C * r * r, H, W))


# -- losses ------------------------------------------------------------------

def l1_mean(a: Tensor, b) -> Tensor:
    """Mean absolute difference over all elements."""
    return mean(abs(sub(a, b)))
