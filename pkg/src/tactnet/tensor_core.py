"""Dense layer kernels with exact backward passes.

Tensors are plain ``numpy.ndarray`` objects in NHWC layout. Every forward
kernel returns ``(output, cache)`` and the matching ``*_backward`` consumes
the cache. Kernels never touch global state; batch-norm running statistics
are updated in place on the arrays passed in.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-4
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


# -- convolution -------------------------------------------------------------

def _same_padding(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv_output_shape(height, width, kernel, stride=1, padding="same"):
    if padding == "same":
        return -(-height // stride), -(-width // stride)
    if padding == "valid":
        if height < kernel or width < kernel:
            raise ShapeError(f"valid {kernel}x{kernel} convolution needs input >= kernel, got {height}x{width}")
        return (height - kernel) // stride + 1, (width - kernel) // stride + 1
    raise ValueError(f"unknown padding mode {padding!r}")


def _im2col(xp, f, stride, ho, wo):
    """Patch matrix ``(N*ho*wo, f*f*C)`` ordered (row, col, channel)."""
    n, c = xp.shape[0], xp.shape[3]
    if f == 1:
        cols = xp[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :]
        return cols.reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (f, f), axis=(1, 2))
    if stride != 1:
        win = win[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, f * f * c)


def conv2d(x, w, b, stride=1, padding="same"):
    """Cross-correlate ``x[N,H,W,Cin]`` with ``w[f,f,Cin,Cout]``.

    Same padding gives ``ceil(H/stride)`` outputs, with any odd pad cell
    placed at the bottom/right.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d NHWC input, got shape {x.shape}")
    fh, fw, cin, cout = w.shape
    if fh != fw or fh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square filter, got {fh}x{fw}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input has {x.shape[3]} channels but filter expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
    n, h, wd, _ = x.shape
    f = fh
    if padding == "same":
        ho, top, bottom = _same_padding(h, f, stride)
        wo, left, right = _same_padding(wd, f, stride)
        if top or bottom or left or right:
            x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        pads = (top, bottom, left, right)
    else:
        ho, wo = conv_output_shape(h, wd, f, stride, "valid")
        pads = (0, 0, 0, 0)
    cols = _im2col(x, f, stride, ho, wo)
    out = cols @ w.reshape(f * f * cin, cout)
    out += b
    cache = (cols, w, stride, pads, x.shape)
    return out.reshape(n, ho, wo, cout), cache


def conv2d_backward(dout, cache, need_dx=True):
    """Gradients ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    cols, w, stride, pads, padded_shape = cache
    f, _, cin, cout = w.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(n * ho * wo, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    top, bottom, left, right = pads
    hp, wp = padded_shape[1], padded_shape[2]
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    # one small GEMM per filter tap avoids transposing the full patch gradient
    for i in range(f):
        for j in range(f):
            dxp[:, i : i + span_h : stride, j : j + span_w : stride, :] += (d2 @ w[i, j].T).reshape(n, ho, wo, cin)
    dx = dxp[:, top : hp - bottom, left : wp - right, :]
    return dx, dw, db


# -- batch normalization ------------------------------------------------------

def _channel_sum(x2):
    # GEMV against ones is far faster than ufunc.reduce over the leading axis
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batchnorm(x, gamma, beta, running_mean, running_var, mode="train",
              epsilon=BN_EPSILON, momentum=BN_MOMENTUM):
    """Per-channel (last axis) batch normalization.

    In ``train`` mode the batch moments are used and the running statistics
    are blended in place: ``running = momentum*running + (1-momentum)*batch``.
    """
    c = x.shape[-1]
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch normalization in train mode needs a batch of at least 2")
        x2 = x.reshape(-1, c)
        m = x2.shape[0]
        mean = _channel_sum(x2) / m
        xhat = x2 - mean
        sq = np.square(xhat)
        var = _channel_sum(sq) / m
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat *= inv_std
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        out = np.multiply(xhat, gamma, out=sq)
        out += beta
        return out.reshape(x.shape), (xhat, gamma, inv_std)
    if mode == "infer":
        scale = gamma / np.sqrt(running_var + epsilon)
        shift = beta - running_mean * scale
        return x * scale.astype(x.dtype) + shift.astype(x.dtype), (None, gamma, scale)
    raise ValueError(f"unknown batch-norm mode {mode!r}")


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std = cache
    if xhat is None:
        # inference mode: a fixed affine map
        return dout * inv_std, None, None
    d2 = dout.reshape(xhat.shape)
    m = xhat.shape[0]
    dbeta = _channel_sum(d2)
    dgamma = _channel_sum(d2 * xhat)
    dx = xhat * dgamma
    dx += dbeta
    np.subtract(m * d2, dx, out=dx)
    dx *= gamma * inv_std / m
    return dx.reshape(dout.shape), dgamma, dbeta


# -- elementwise, pooling, dense ---------------------------------------------

def relu(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2d(x, window=2, stride=2, return_index=True):
    """2x2 stride-2 max pooling with ceil-mode output extents.

    Ragged bottom/right windows only see the cells that exist. Ties resolve
    to the first cell in row-major order. With ``return_index=False`` the
    argmax map is skipped and the cache is None (inference only).
    """
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    n, h, w, c = x.shape
    if h == 0 or w == 0:
        raise ShapeError(f"cannot pool an empty spatial extent {h}x{w}")
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)), constant_values=-np.inf)
    rows = np.maximum(x[:, 0::2], x[:, 1::2])
    out = np.maximum(rows[:, :, 0::2], rows[:, :, 1::2])
    if not return_index:
        return out, None
    # position of the first row-major maximum: 0 unless a misses, then 1 unless b misses, ...
    miss_a = (x[:, 0::2, 0::2] != out).view(np.int8)
    miss_b = (x[:, 0::2, 1::2] != out).view(np.int8)
    miss_c = (x[:, 1::2, 0::2] != out).view(np.int8)
    idx = miss_a * (1 + miss_b * (1 + miss_c))
    return out, (idx, (n, h, w, c))


def maxpool2d_backward(dout, cache):
    idx, (n, h, w, c) = cache
    _, ho, wo, _ = dout.shape
    dx = np.zeros((n, 2 * ho, 2 * wo, c), dtype=dout.dtype)
    dx[:, 0::2, 0::2] = dout * (idx == 0)
    dx[:, 0::2, 1::2] = dout * (idx == 1)
    dx[:, 1::2, 0::2] = dout * (idx == 2)
    dx[:, 1::2, 1::2] = dout * (idx == 3)
    return dx[:, :h, :w, :]


def fully_connected(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected input {x.shape} incompatible with weights {w.shape}")
    return x @ w + b, x


def fully_connected_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# -- loss ---------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Returns ``(loss, grad, probs)`` with ``grad = (probs - onehot) / N``.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(n)
    logp = z[rows, labels] - np.log(s[:, 0])
    loss = float(-logp.mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad, probs


# -- optimizer ----------------------------------------------------------------

def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=0.0):
    """In-place momentum SGD over dicts of arrays keyed identically.

    ``v <- momentum*v - lr*(g + weight_decay*p)`` then ``p <- p + v``.
    Missing velocity entries are created as zeros.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        step = g + weight_decay * p if weight_decay else g
        v *= momentum
        v -= lr * step
        p += v
    return params
