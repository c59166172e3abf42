"""Forward/backward pairs for the small closed set of layers the model uses.

Every ``op(...)`` returns ``(out, cache)`` and ``op_backward(dout, cache)``
returns gradients in argument order. Arrays keep their dtype, so the same
code runs float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ w.T
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def layer_norm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _pool_counts(n, s):
    out = -(-n // s)
    counts = np.full(out, s)
    counts[-1] = n - s * (out - 1)
    return counts


def avg_pool(x, s):
    """``s x s`` mean pooling of an ``(h, w, c)`` grid; partial edge windows average what exists."""
    if s == 1:
        return x, (s, x.shape)
    h, w, c = x.shape
    hp, wp = -(-h // s), -(-w // s)
    padded = np.zeros((hp * s, wp * s, c), dtype=x.dtype)
    padded[:h, :w] = x
    sums = padded.reshape(hp, s, wp, s, c).sum(axis=(1, 3))
    counts = np.outer(_pool_counts(h, s), _pool_counts(w, s)).astype(x.dtype)
    return sums / counts[:, :, None], (s, x.shape)


def avg_pool_backward(dy, cache):
    s, shape = cache
    if s == 1:
        return dy
    h, w, c = shape
    counts = np.outer(_pool_counts(h, s), _pool_counts(w, s)).astype(dy.dtype)
    spread = upsample_nearest(dy / counts[:, :, None], s, h, w)
    return spread


def upsample_nearest(x, s, h, w):
    """Repeat each cell ``s x s`` times and crop to ``(h, w)``."""
    if s == 1:
        return x[:h, :w]
    return np.repeat(np.repeat(x, s, axis=0), s, axis=1)[:h, :w]


def upsample_nearest_backward(dy, s, hp, wp):
    if s == 1:
        return dy
    h, w, c = dy.shape
    padded = np.zeros((hp * s, wp * s, c), dtype=dy.dtype)
    padded[:h, :w] = dy
    return padded.reshape(hp, s, wp, s, c).sum(axis=(1, 3))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def space_to_depth(x, s):
    """Group ``s x s`` cells of an ``(h, w, c)`` grid into channels; h, w must divide."""
    h, w, c = x.shape
    return x.reshape(h // s, s, w // s, s, c).transpose(0, 2, 1, 3, 4).reshape(h // s, w // s, s * s * c)


def depth_to_space(x, s, c):
    hp, wp, _ = x.shape
    return x.reshape(hp, wp, s, s, c).transpose(0, 2, 1, 3, 4).reshape(hp * s, wp * s, c)
