"""Forward/backward kernels for every op the detection network uses.

All image tensors are N x C x H x W. Convolutions are 3x3 with zero padding 1.
Stride-1 convs that do not widen the channel count use a flat-shift kernel;
the rest are lowered to one matmul over an im2col buffer.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


def _im2col(xp: np.ndarray, h_out: int, w_out: int, stride: int) -> np.ndarray:
    # xp: padded input (N, C, H+2, W+2) -> cols (C, 3, 3, N, h_out, w_out)
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h_out, w_out), dtype=xp.dtype)
    span_h = stride * (h_out - 1) + 1
    span_w = stride * (w_out - 1) + 1
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xt[:, :, ky:ky + span_h:stride, kx:kx + span_w:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1) -> Tensor:
    if stride == 1 and x.shape[1] >= weight.shape[0]:
        out, backward_fn = _conv_flat_shift(x, weight)
    else:
        out, backward_fn = _conv_im2col(x, weight, stride)
    o = weight.shape[0]
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g: np.ndarray) -> None:
        backward_fn(g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward)


def _conv_im2col(x: Tensor, weight: Tensor, stride: int):
    n, c, h, w = x.shape
    o = weight.shape[0]
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h_out, w_out, stride).reshape(c * 9, -1)
    w2 = weight.data.reshape(o, c * 9)
    out = np.ascontiguousarray((w2 @ cols).reshape(o, n, h_out, w_out).transpose(1, 0, 2, 3))

    def backward(g: np.ndarray) -> None:
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, 3, 3, n, h_out, w_out)
            dxp = np.zeros((c, n, h + 2, w + 2), dtype=g.dtype)
            span_h = stride * (h_out - 1) + 1
            span_w = stride * (w_out - 1) + 1
            for ky in range(3):
                for kx in range(3):
                    dxp[:, :, ky:ky + span_h:stride, kx:kx + span_w:stride] += dcols[:, ky, kx]
            x._accumulate(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))

    return out, backward


def _conv_flat_shift(x: Tensor, weight: Tensor):
    """Stride-1 conv on the flattened zero-padded input.

    With the padded image flattened to (C, P), a kernel tap (ky, kx) is a
    constant offset ky*(W+2)+kx in the flat index, so one (9O x C) @ (C x P)
    matmul followed by nine shifted slice-adds gives the output anchored at
    each window's top-left corner. Cheaper than im2col when O <= C because
    only O-channel arrays get shifted.
    """
    n, c, h, w = x.shape
    o = weight.shape[0]
    hp, wp = h + 2, w + 2
    p = n * hp * wp
    offs = [ky * wp + kx for ky in range(3) for kx in range(3)]
    smax = offs[-1]
    span = p - smax
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, p)
    w_all = weight.data.transpose(2, 3, 0, 1).reshape(9 * o, c)
    z = (w_all @ xf).reshape(9, o, p)
    y = np.zeros((o, p), dtype=x.dtype)
    yv = y[:, :span]
    for k, s in enumerate(offs):
        yv += z[k, :, s:s + span]
    out = np.ascontiguousarray(y.reshape(o, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3))

    def backward(g: np.ndarray) -> None:
        gpad = np.zeros((o, smax + p), dtype=g.dtype)
        gpad[:, smax:].reshape(o, n, hp, wp)[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
        gcols = np.empty((9, o, p), dtype=g.dtype)
        for k, s in enumerate(offs):
            gcols[k] = gpad[:, smax - s:smax - s + p]
        gcols = gcols.reshape(9 * o, p)
        if weight.requires_grad:
            dw_t = xf @ gcols.T  # (C, 9*O) ordered (ky, kx, o)
            weight._accumulate(dw_t.reshape(c, 3, 3, o).transpose(3, 0, 1, 2))
        if x.requires_grad:
            w_t = weight.data.transpose(1, 2, 3, 0).reshape(c, 9 * o)
            dxf = w_t @ gcols
            x._accumulate(dxf.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))

    return out, backward


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional); otherwise the
    running buffers normalize the input.
    """
    shape = (1, -1, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        centered = x.data - running_mean.reshape(shape).astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                dx = (dxhat - s1 / m - xhat * (s2 / m)) * inv_std.reshape(shape)
            else:
                dx = dxhat * inv_std.reshape(shape)
            x._accumulate(dx)

    return Tensor._result(out, (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.where(pos, g, g * g.dtype.type(slope)))

    return Tensor._result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * out * (1.0 - out))

    return Tensor._result(out, (x,), backward)


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return Tensor._result(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._result(out, (x,), backward)


def avg_pool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        x._accumulate((g / 4.0).repeat(2, axis=2).repeat(2, axis=3))

    return Tensor._result(out, (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return Tensor._result(out, tuple(xs), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._result(a.data + b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x._accumulate(g * g.dtype.type(factor))

    return Tensor._result(x.data * x.data.dtype.type(factor), (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error as a 0-d tensor."""
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    k = pred.dtype.type(2.0 / diff.size)

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad:
            pred._accumulate(g * k * diff)
        if target.requires_grad:
            target._accumulate(-g * k * diff)

    return Tensor._result(out, (pred, target), backward)
