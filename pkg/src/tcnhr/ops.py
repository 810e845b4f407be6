"""Forward kernels and backward rules for every layer of the network.

All kernels take channel-first data: ``(B, C, T)`` for sequences and
``(B, F)`` for flat features. ``conv1d_causal`` also accepts a single
``(C, T)`` map. Kernels never mutate their inputs, with one documented
exception: ``batchnorm`` in train mode updates the running-stat buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, TapeError
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_LOG2 = math.log(2.0)


def conv_out_len(t: int, stride: int) -> int:
    return -(-t // stride)


def pool_out_len(t: int, window: int, stride: int) -> int:
    return (t - window) // stride + 1


# --------------------------------------------------------------------------
# causal dilated convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvContext:
    """Values saved by the forward pass for ``conv1d_backward``."""

    cols: np.ndarray  # (B, C_in*K, T_out), tap index fastest
    x_shape: tuple[int, ...]
    weight: np.ndarray
    dilation: int
    stride: int


def _im2col(x: np.ndarray, k: int, dilation: int, stride: int) -> np.ndarray:
    b, c, t = x.shape
    pad = (k - 1) * dilation
    t_out = conv_out_len(t, stride)
    xp = np.zeros((b, c, pad + t), dtype=x.dtype)
    xp[:, :, pad:] = x
    cols = np.empty((b, c, k, t_out), dtype=x.dtype)
    stop = stride * (t_out - 1) + 1
    for i in range(k):
        start = pad - dilation * i
        cols[:, :, i, :] = xp[:, :, start : start + stop : stride]
    return cols.reshape(b, c * k, t_out)


def _check_conv(x: np.ndarray, w: np.ndarray, bias, dilation: int, stride: int) -> None:
    if dilation < 1 or stride < 1:
        raise ArgumentError(f"dilation and stride must be >= 1, got d={dilation}, s={stride}")
    if w.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2] != w.shape[1]:
        raise DimensionError(
            f"conv1d: input shape {x.shape} incompatible with weight shape {w.shape}"
        )
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({w.shape[0]},)")


def conv1d_causal(x, weight, bias=None, dilation: int = 1, stride: int = 1) -> Tensor:
    """Causal dilated 1-D convolution.

    ``y[m, t] = sum_i sum_l x[l, t*stride - dilation*i] * W[m, l, i] + bias[m]``
    with zero left-padding of ``(K-1)*dilation`` samples, so output step
    ``t`` never sees inputs later than ``t*stride``. Output length is
    ``ceil(T / stride)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    _check_conv(x.data, weight.data, None if bias is None else bias.data, dilation, stride)
    single = x.ndim == 2
    x3 = x.data[None] if single else x.data
    c_out, c_in, k = weight.shape
    cols = _im2col(x3, k, dilation, stride)
    y = np.matmul(weight.data.reshape(c_out, c_in * k), cols)
    if bias is not None:
        y += bias.data[:, None]
    ctx = ConvContext(cols, x3.shape, weight.data, dilation, stride)
    out = Tensor(y[0] if single else y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw, gb = conv1d_backward(g[None] if single else g, ctx)
        grads = [gx[0] if single else gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return record(out, inputs, backward)


def conv1d_backward(grad_out: np.ndarray, ctx: ConvContext | None):
    """Gradients of ``conv1d_causal`` w.r.t. input, weight and bias."""
    if ctx is None:
        raise TapeError("conv1d_backward called without a recorded forward")
    b, c_in, t = ctx.x_shape
    c_out, _, k = ctx.weight.shape
    t_out = ctx.cols.shape[2]
    g = np.asarray(grad_out, dtype=ctx.cols.dtype)
    if g.shape != (b, c_out, t_out):
        raise DimensionError(f"grad_out shape {g.shape} != forward output {(b, c_out, t_out)}")
    grad_b = g.sum(axis=(0, 2))
    grad_w = np.tensordot(g, ctx.cols, axes=([0, 2], [0, 2])).reshape(c_out, c_in, k)
    gcols = np.matmul(ctx.weight.reshape(c_out, c_in * k).T, g).reshape(b, c_in, k, t_out)
    pad = (k - 1) * ctx.dilation
    gxp = np.zeros((b, c_in, pad + t), dtype=g.dtype)
    stop = ctx.stride * (t_out - 1) + 1
    for i in range(k):
        start = pad - ctx.dilation * i
        gxp[:, :, start : start + stop : ctx.stride] += gcols[:, :, i, :]
    return gxp[:, :, pad:], grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over axis 1.

    In train mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like most frameworks). In
    infer mode only the running buffers are read.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    if xd.ndim not in (2, 3):
        raise DimensionError(f"batchnorm expects (B, C) or (B, C, T), got {xd.shape}")
    if xd.shape[0] == 0 or xd.size == 0:
        raise ArgumentError("batchnorm: zero-length batch")
    c = xd.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm: {name} shape {arr.shape} != ({c},)")
    axes = (0,) if xd.ndim == 2 else (0, 2)
    bshape = (1, c) if xd.ndim == 2 else (1, c, 1)
    n = xd.size // c

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = Tensor(y)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# elementwise / pooling / affine
# --------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype))
    return record(out, (x,), lambda g: (g * mask,))


def avgpool1d(x, window: int, stride: int | None = None) -> Tensor:
    """Mean pooling along the last axis (non-overlapping when stride == window)."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ArgumentError(f"pooling window and stride must be >= 1, got {window}, {stride}")
    t = x.shape[-1]
    if window > t:
        raise ArgumentError(f"pooling window {window} larger than sequence length {t}")
    t_out = pool_out_len(t, window, stride)
    stop = stride * (t_out - 1) + 1
    acc = np.zeros(x.shape[:-1] + (t_out,), dtype=x.dtype)
    for j in range(window):
        acc += x.data[..., j : j + stop : stride]
    out = Tensor(acc / x.dtype.type(window))

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / x.dtype.type(window)
        for j in range(window):
            gx[..., j : j + stop : stride] += share
        return (gx,)

    return record(out, (x,), backward)


def flatten(x) -> Tensor:
    """(B, C, T) -> (B, C*T), channel-major."""
    x = as_tensor(x)
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    return record(out, (x,), lambda g: (g.reshape(shape),))


def squeeze_last(x) -> Tensor:
    """(B, 1) -> (B,)."""
    x = as_tensor(x)
    shape = x.shape
    out = Tensor(x.data[..., 0])
    return record(out, (x,), lambda g: (g.reshape(shape),))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ W.T + b`` with ``W`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    single = x.ndim == 1
    x2 = x.data[None] if single else x.data
    # stacked matmul: one product per row, so a window's result does not depend on batch size
    y = np.matmul(x2[:, None, :], weight.data.T)[:, 0, :]
    if bias is not None:
        y = y + bias.data
    out = Tensor(y[0] if single else y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g[None] if single else g
        gx = g2 @ weight.data
        grads = [gx[0] if single else gx, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, inputs, backward)


def logcosh_loss(pred, target) -> Tensor:
    """Mean log(cosh(pred - target)), evaluated without overflow."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"logcosh: pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ArgumentError("logcosh: empty batch")
    e = pred.data - target
    a = np.abs(e)
    per = a + np.log1p(np.exp(-2.0 * a)) - _LOG2
    n = pred.size
    out = Tensor(np.asarray(per.mean(), dtype=pred.dtype))
    return record(out, (pred,), lambda g: (g * np.tanh(e) / pred.dtype.type(n),))
