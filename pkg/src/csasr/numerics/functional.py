"""Differentiable primitives with fused backward passes.

Every function takes and returns :class:`Tensor`. Shapes follow the
``(..., T, D)`` convention: time second-to-last, features last.
"""

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, _wrap, unbroadcast


def _axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d tensor")
    return axis % x.ndim


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x, axis=-1):
    x = _wrap(x)
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), back)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gb = flat_g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, gg, gb

    return Tensor._from_op(y, (x, gamma, beta), back)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training=True,
    momentum=0.1,
    eps=1e-5,
    mask=None,
):
    """Normalize channels (last axis) using statistics over all other axes.

    ``mask`` (shape ``x.shape[:-1]``, truthy = valid) restricts the batch
    statistics to valid positions. ``running_mean``/``running_var`` are
    ndarrays updated in place in training mode. When fewer than two valid
    positions exist the per-position statistics over channels are used.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    flat = x.data.reshape(-1, c)
    m = (
        np.ones(flat.shape[0], dtype=bool)
        if mask is None
        else np.asarray(mask, dtype=bool).reshape(-1)
    )
    n = int(m.sum())

    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        y = xhat * gamma.data + beta.data

        def back_eval(g):
            red = tuple(range(g.ndim - 1))
            return g * gamma.data * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return Tensor._from_op(y, (x, gamma, beta), back_eval)

    if n < 2:
        return layer_norm(x, Tensor(np.ones(c)), Tensor(np.zeros(c)), eps) * gamma + beta

    valid = flat[m]
    mu = valid.mean(axis=0)
    var = ((valid - mu) ** 2).mean(axis=0)
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var * n / (n - 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data
    mexp = m.reshape(x.shape[:-1] + (1,)).astype(x.data.dtype)

    def back(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=red)
        s2 = (dxhat * xhat).sum(axis=red)
        dx = inv * dxhat - mexp * (inv / n) * (s1 + xhat * s2)
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._from_op(y, (x, gamma, beta), back)


def conv1d_depthwise(x, kernel, bias=None):
    """Same-length depthwise convolution along time.

    ``x`` is ``(..., T, D)`` and ``kernel`` is ``(D, K)`` with odd K;
    ``y[t, d] = sum_k x[t + k - (K-1)/2, d] * kernel[d, k]`` with zero padding.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    d, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if x.shape[-1] != d:
        raise ShapeError(f"conv1d_depthwise: input has {x.shape[-1]} channels, kernel {d}")
    t = x.shape[-2]
    half = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    y = np.zeros(x.shape, dtype=np.result_type(x.data, w))
    for j in range(k):
        y += xp[..., j : j + t, :] * w[:, j]
    parents = (x, kernel)
    if bias is not None:
        bias = _wrap(bias)
        y = y + bias.data
        parents = parents + (bias,)

    def back(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty_like(w)
        red = tuple(range(g.ndim - 1))
        for j in range(k):
            gp[..., j : j + t, :] += g * w[:, j]
            gw[:, j] = (g * xp[..., j : j + t, :]).sum(axis=red)
        grads = (gp[..., half : half + t, :], gw)
        if bias is not None:
            grads = grads + (g.sum(axis=red),)
        return grads

    return Tensor._from_op(y, parents, back)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation over the last two axes of ``(B, Cin, H, W)`` input."""
    x, weight = _wrap(x), _wrap(weight)
    b, cin, h, w_ = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w_ + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w_} too small for kernel {kh}x{kw}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : ho * stride : stride, : wo * stride : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
    y = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gflat.T @ cols).reshape(weight.shape)
        dcols = (gflat @ wmat).reshape(b, ho, wo, cin, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :, :, i : i + ho * stride : stride, j : j + wo * stride : stride
                ] += dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w_]
        if bias is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return Tensor._from_op(y, parents, back)


def sigmoid(x):
    x = _wrap(x)
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),))


def swish(x):
    x = _wrap(x)
    s = _sigmoid(x.data)
    return Tensor._from_op(
        x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),)
    )


def relu(x):
    x = _wrap(x)
    on = x.data > 0
    return Tensor._from_op(x.data * on, (x,), lambda g: (g * on,))


def glu(x, axis=-1):
    """Split ``axis`` into halves ``a, b`` and return ``a * sigmoid(b)``."""
    x = _wrap(x)
    axis = _axis(x, axis)
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even size along axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return Tensor._from_op(a * s, (x,), back)


_ACTIVATIONS = {"glu": glu, "swish": swish, "sigmoid": sigmoid, "relu": relu}


def activation(x, kind):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None


def dropout(x, rate, rng, training=True):
    x = _wrap(x)
    if not training or rate == 0:
        return x
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep.astype(x.data.dtype)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    x, weight = _wrap(x), _wrap(weight)
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {din}")
    y = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = _wrap(bias)
        y = y + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, dout)
        grads = (g @ weight.data.T, x.data.reshape(-1, din).T @ g2)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return Tensor._from_op(y, parents, back)


def embedding(ids, table):
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._from_op(table.data[ids], (table,), back)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    x = _wrap(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return Tensor._from_op(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def where_mask(x, mask):
    """Multiply by a broadcastable 0/1 mask (constant)."""
    x = _wrap(x)
    m = np.asarray(mask, dtype=x.data.dtype)
    return Tensor._from_op(x.data * m, (x,), lambda g: (unbroadcast(g * m, x.shape),))


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back
    )
