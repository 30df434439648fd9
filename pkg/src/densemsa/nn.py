"""Differentiable neural-network primitives built on :mod:`densemsa.tensor`."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, _make, relu, sigmoid, tanh

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d: stride must be ≥ 1, got {(sh, sw)}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xd, wd = x.data, kernel.data

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,nchw->nohw", w2, xd, optimize=True)

        def fn1(g):
            gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
            gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)
            return gx, gw[:, :, None, None]

        return _make(out, (x, kernel), fn1)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    ho = conv_out_extent(h, kh, sh, ph)
    wo = conv_out_extent(w, kw, sw, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, wd, axes=([1], [0]))  # N,Ho,Wo,Cin,kh,kw
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, kernel), fn)


def pool2d(x: Tensor, kind: str = "max", window=2, stride=None) -> Tensor:
    """Unpadded max or average pooling over the last two axes."""
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if kh < 1 or kw < 1:
        raise ShapeError("pool2d: empty window")
    if kind not in ("max", "average"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    h, w = x.shape[-2:]
    if kh > h or kw > w:
        raise ShapeError(f"pool2d: window {(kh, kw)} exceeds input {x.shape}")
    xd = x.data
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(xd, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    win = win.reshape(win.shape[:-2] + (kh * kw,))

    if kind == "average":
        out = win.mean(axis=-1)

        def fn_avg(g):
            gx = np.zeros(xd.shape, dtype=DTYPE)
            share = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[..., i:i + sh * ho:sh, j:j + sw * wo:sw] += share
            return (gx,)

        return _make(out, (x,), fn_avg)

    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn_max(g):
        gx = np.zeros(xd.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gx[..., i:i + sh * ho:sh, j:j + sw * wo:sw] += g * (arg == i * kw + j)
        return (gx,)

    return _make(out, (x,), fn_max)


def max_pool2d(x, window=2, stride=None):
    return pool2d(x, "max", window, stride)


def avg_pool2d(x, window=2, stride=None):
    return pool2d(x, "average", window, stride)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization of ``x[N,C,H,W]``.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        if xd.size == 0:
            raise ShapeError("batch_norm: empty batch in training mode")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), fn)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: identity at inference, survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax whose normalizer runs over cells with ``mask != 0`` only.

    Masked cells get probability exactly 0.
    """
    mask = np.asarray(mask) != 0
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has every cell masked")
    neg = np.where(mask, x.data, -np.inf)
    z = x.data - neg.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def maxout2(x: Tensor, axis: int = -1) -> Tensor:
    """Maxima over adjacent pairs along ``axis``; halves that extent."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"maxout2 needs an even extent, axis {axis} has {n}")
    xd = np.moveaxis(x.data, axis, -1)
    pairs = xd.reshape(xd.shape[:-1] + (n // 2, 2))
    first = pairs[..., 0] >= pairs[..., 1]
    out = np.where(first, pairs[..., 0], pairs[..., 1])

    def fn(g):
        g = np.moveaxis(g, axis, -1)
        gp = np.stack([g * first, g * ~first], axis=-1).reshape(xd.shape)
        return (np.moveaxis(gp, -1, axis),)

    return _make(np.moveaxis(out, -1, axis), (x,), fn)


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis)
    if kind == "maxout2":
        return maxout2(x, axis)
    raise ValueError(f"unknown activation {kind!r}")
