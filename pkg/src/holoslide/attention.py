"""Linear ReLU attention, multi-scale attention blocks and the two-stage backbone.

The kernel ``ReLU(Q) ReLU(K)^T`` is re-associated so the key/value summary
``S = sum_j ReLU(K_j)^T V_j`` and normaliser ``s = sum_j ReLU(K_j)`` are built
once per call, which makes the cost O(N d^2) instead of O(N^2 d).

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError, TokenError


@dataclass
class AttentionConfig:
    d_model: int = 256
    heads: int = 4
    scales: tuple = (1, 2, 4)
    epsilon: float = 1e-6
    kernel: str = "relu"
    blocks: tuple = (2, 2)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if (2 * self.d_model) % self.heads:
            raise ConfigError("stage-2 width must be divisible by heads")
        if not self.scales or min(self.scales) < 1:
            raise ConfigError("scales must be a non-empty list of integers >= 1")
        if self.kernel not in ("relu", "mhsa"):
            raise ConfigError(f"unknown attention kernel {self.kernel!r}")
        if len(self.blocks) != 2:
            raise ConfigError("blocks must give the depth of both stages")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite attention input")


def _relu_attention_fwd(Q, K, V, epsilon):
    q, qmask = nn.relu(Q)
    k, kmask = nn.relu(K)
    S = np.swapaxes(k, -1, -2) @ V                # (..., d, dv), built once
    s = k.sum(axis=-2)                            # (..., d), built once
    num = q @ S                                   # (..., N, dv)
    den = np.einsum("...nd,...d->...n", q, s) + epsilon
    safe = den > 0
    inv = np.where(safe, 1.0 / np.where(safe, den, 1.0), 0.0).astype(Q.dtype)
    A = num * inv[..., None]
    return A, (q, qmask, k, kmask, V, S, s, inv, A)


def relu_linear_attention(Q, K, V, epsilon=1e-6):
    """``A_i = ReLU(Q_i) S / (ReLU(Q_i) s + epsilon)`` for every query row.

    Works on ``(N, d)`` inputs or any batch of them ``(..., N, d)``. Rows whose
    denominator is exactly zero (only possible with ``epsilon=0``) give 0.
    """
    _check_finite(Q, K, V)
    return _relu_attention_fwd(Q, K, V, epsilon)[0]


def relu_linear_attention_backward(dA, cache):
    q, qmask, k, kmask, V, S, s, inv, A = cache
    dnum = dA * inv[..., None]
    dden = -(dA * A).sum(axis=-1) * inv
    dq = dnum @ np.swapaxes(S, -1, -2) + dden[..., None] * s[..., None, :]
    dS = np.swapaxes(q, -1, -2) @ dnum
    ds = np.einsum("...n,...nd->...d", dden, q)
    dk = V @ np.swapaxes(dS, -1, -2) + ds[..., None, :]
    dV = k @ dS
    return dq * qmask, dk * kmask, dV


def _softmax_attention_fwd(Q, K, V, epsilon=None):
    scale = 1.0 / np.sqrt(Q.shape[-1])
    logits = (Q @ np.swapaxes(K, -1, -2)) * scale
    logits = logits - logits.max(axis=-1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=-1, keepdims=True)
    return P @ V, (Q, K, V, P, scale)


def softmax_attention(Q, K, V):
    _check_finite(Q, K, V)
    return _softmax_attention_fwd(Q, K, V)[0]


def softmax_attention_backward(dA, cache):
    Q, K, V, P, scale = cache
    dV = np.swapaxes(P, -1, -2) @ dA
    dP = dA @ np.swapaxes(V, -1, -2)
    dlogits = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    return dlogits @ K, np.swapaxes(dlogits, -1, -2) @ Q, dV


_KERNELS = {
    "relu": (_relu_attention_fwd, relu_linear_attention_backward),
    "mhsa": (_softmax_attention_fwd, softmax_attention_backward),
}


def _split_heads(x, heads):
    hp, wp, d = x.shape
    return x.reshape(hp * wp, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x, hp, wp):
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(hp, wp, heads * dh)


def multi_scale_attention(x, p, prefix, cfg: AttentionConfig):
    """Pre-norm multi-scale attention with residual on an ``(h, w, d)`` grid.

    For each scale ``s`` the projected Q/K/V grids are ``s x s`` mean-pooled,
    attended per head, nearest-upsampled back, weighted by a learned per-scale
    gain and averaged over scales; heads are mixed by the output projection.
    """
    h, w, d = x.shape
    if max(cfg.scales) > min(h, w):
        raise ConfigError(f"scale {max(cfg.scales)} exceeds grid {h}x{w}")
    heads = cfg.heads
    fwd, _ = _KERNELS[cfg.kernel]
    xn, ln_c = nn.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    Q, q_c = nn.linear(xn, p[f"{prefix}.wq"])
    K, k_c = nn.linear(xn, p[f"{prefix}.wk"])
    V, v_c = nn.linear(xn, p[f"{prefix}.wv"])
    gains = p[f"{prefix}.scale_w"]
    n_scales = len(cfg.scales)
    fused = np.zeros_like(x)
    scale_caches = []
    for si, s in enumerate(cfg.scales):
        Qs, pc = nn.avg_pool(Q, s)
        Ks, _ = nn.avg_pool(K, s)
        Vs, _ = nn.avg_pool(V, s)
        hp, wp = Qs.shape[:2]
        A, a_c = fwd(_split_heads(Qs, heads), _split_heads(Ks, heads), _split_heads(Vs, heads), cfg.epsilon)
        Ag = _merge_heads(A, hp, wp)
        up = nn.upsample_nearest(Ag, s, h, w)
        fused += gains[si] * up
        scale_caches.append((s, pc, hp, wp, a_c, up))
    fused /= n_scales
    y, o_c = nn.linear(fused, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return x + y, (ln_c, q_c, k_c, v_c, scale_caches, o_c, gains, (h, w))


def multi_scale_attention_backward(dout, cache, prefix, cfg: AttentionConfig):
    ln_c, q_c, k_c, v_c, scale_caches, o_c, gains, (h, w) = cache
    _, bwd = _KERNELS[cfg.kernel]
    grads = {}
    dfused, grads[f"{prefix}.wo"], grads[f"{prefix}.bo"] = nn.linear_backward(dout, o_c)
    dfused = dfused / len(cfg.scales)
    dgains = np.zeros_like(gains)
    dQ = np.zeros_like(dout)
    dK = np.zeros_like(dout)
    dV = np.zeros_like(dout)
    for si, (s, pc, hp, wp, a_c, up) in enumerate(scale_caches):
        dgains[si] = (dfused * up).sum()
        dAg = nn.upsample_nearest_backward(gains[si] * dfused, s, hp, wp)
        dq, dk, dv = bwd(_split_heads(dAg, cfg.heads), a_c)
        dQ += nn.avg_pool_backward(_merge_heads(dq, hp, wp), pc)
        dK += nn.avg_pool_backward(_merge_heads(dk, hp, wp), pc)
        dV += nn.avg_pool_backward(_merge_heads(dv, hp, wp), pc)
    grads[f"{prefix}.scale_w"] = dgains
    dxn, grads[f"{prefix}.wq"], _ = nn.linear_backward(dQ, q_c)
    dxk, grads[f"{prefix}.wk"], _ = nn.linear_backward(dK, k_c)
    dxv, grads[f"{prefix}.wv"], _ = nn.linear_backward(dV, v_c)
    dx, grads[f"{prefix}.ln1.g"], grads[f"{prefix}.ln1.b"] = nn.layer_norm_backward(dxn + dxk + dxv, ln_c)
    return dout + dx, grads


def ffn(x, p, prefix):
    """Pre-norm two-layer ReLU MLP (hidden width 4d) with residual."""
    xn, ln_c = nn.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    hid, l1_c = nn.linear(xn, p[f"{prefix}.w1"], p[f"{prefix}.b1"])
    act, r_c = nn.relu(hid)
    y, l2_c = nn.linear(act, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return x + y, (ln_c, l1_c, r_c, l2_c)


def ffn_backward(dout, cache, prefix):
    ln_c, l1_c, r_c, l2_c = cache
    grads = {}
    dact, grads[f"{prefix}.w2"], grads[f"{prefix}.b2"] = nn.linear_backward(dout, l2_c)
    dhid = nn.relu_backward(dact, r_c)
    dxn, grads[f"{prefix}.w1"], grads[f"{prefix}.b1"] = nn.linear_backward(dhid, l1_c)
    dx, grads[f"{prefix}.ln2.g"], grads[f"{prefix}.ln2.b"] = nn.layer_norm_backward(dxn, ln_c)
    return dout + dx, grads


def block(x, p, prefix, cfg):
    x, a_c = multi_scale_attention(x, p, prefix, cfg)
    x, f_c = ffn(x, p, prefix)
    return x, (a_c, f_c)


def block_backward(dout, cache, prefix, cfg):
    a_c, f_c = cache
    dx, g1 = ffn_backward(dout, f_c, prefix)
    dx, g2 = multi_scale_attention_backward(dx, a_c, prefix, cfg)
    g1.update(g2)
    return dx, g1


def init_block(gen, d, n_scales, prefix, dtype=np.float32):
    def he(fan_in, shape):
        return (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    return {
        f"{prefix}.ln1.g": np.ones(d, dtype), f"{prefix}.ln1.b": np.zeros(d, dtype),
        f"{prefix}.wq": he(d, (d, d)), f"{prefix}.wk": he(d, (d, d)),
        f"{prefix}.wv": he(d, (d, d)), f"{prefix}.wo": he(d, (d, d)),
        f"{prefix}.bo": np.zeros(d, dtype),
        f"{prefix}.scale_w": np.ones(n_scales, dtype),
        f"{prefix}.ln2.g": np.ones(d, dtype), f"{prefix}.ln2.b": np.zeros(d, dtype),
        f"{prefix}.w1": he(d, (d, 4 * d)), f"{prefix}.b1": np.zeros(4 * d, dtype),
        f"{prefix}.w2": he(4 * d, (4 * d, d)), f"{prefix}.b2": np.zeros(d, dtype),
    }


def init_backbone(gen, cfg: AttentionConfig, vocab: int, grid: tuple, dtype=np.float32) -> dict:
    """Embedding table, 2-D positional table sized ``grid = (rows, cols)``, both stages."""
    d = cfg.d_model
    p = {
        "embed": (gen.standard_normal((vocab, d)) * 0.02).astype(dtype),
        "pos": (gen.standard_normal((grid[0], grid[1], d)) * 0.02).astype(dtype),
    }
    for i in range(cfg.blocks[0]):
        p.update(init_block(gen, d, len(cfg.scales), f"stage1.{i}", dtype))
    p["down.w"] = (gen.standard_normal((4 * d, 2 * d)) * np.sqrt(2.0 / (4 * d))).astype(dtype)
    p["down.b"] = np.zeros(2 * d, dtype)
    for i in range(cfg.blocks[1]):
        p.update(init_block(gen, 2 * d, len(cfg.scales), f"stage2.{i}", dtype))
    return p


def embed_tokens(indices, p):
    table = p["embed"]
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= len(table)):
        raise TokenError(f"token index outside [0, {len(table)})")
    return table[indices]


def embed_tokens_backward(dx, indices, table_shape, dtype):
    dtable = np.zeros(table_shape, dtype=dtype)
    np.add.at(dtable, np.asarray(indices).ravel(), dx.reshape(-1, table_shape[1]))
    return dtable


def downsample2x(x, p):
    """Learned 2x strided merge: concatenate each 2x2 cell group and project to 2d."""
    h, w, d = x.shape
    padded = np.zeros((h + h % 2, w + w % 2, d), dtype=x.dtype)
    padded[:h, :w] = x
    merged = nn.space_to_depth(padded, 2)
    y, l_c = nn.linear(merged, p["down.w"], p["down.b"])
    return y, (l_c, (h, w, d))


def downsample2x_backward(dy, cache):
    l_c, (h, w, d) = cache
    dmerged, dw, db = nn.linear_backward(dy, l_c)
    dpadded = nn.depth_to_space(dmerged, 2, d)
    return dpadded[:h, :w], {"down.w": dw, "down.b": db}


def stages_forward(x, p, cfg: AttentionConfig):
    """Positional embedding, stage 1, 2x merge, stage 2 on an embedded ``(h, w, d)`` grid."""
    h, w, _ = x.shape
    pos = p["pos"]
    if h > pos.shape[0] or w > pos.shape[1]:
        raise ConfigError(f"token grid {h}x{w} exceeds positional table {pos.shape[0]}x{pos.shape[1]}")
    x = x + pos[:h, :w]
    caches = []
    for i in range(cfg.blocks[0]):
        x, c = block(x, p, f"stage1.{i}", cfg)
        caches.append(c)
    x, d_c = downsample2x(x, p)
    for i in range(cfg.blocks[1]):
        x, c = block(x, p, f"stage2.{i}", cfg)
        caches.append(c)
    return x, (caches, d_c, (h, w))


def stages_backward(dout, cache, p, cfg: AttentionConfig):
    caches, d_c, (h, w) = cache
    grads = {}
    dx = dout
    for i in reversed(range(cfg.blocks[1])):
        dx, g = block_backward(dx, caches[cfg.blocks[0] + i], f"stage2.{i}", cfg)
        grads.update(g)
    dx, g = downsample2x_backward(dx, d_c)
    grads.update(g)
    for i in reversed(range(cfg.blocks[0])):
        dx, g = block_backward(dx, caches[i], f"stage1.{i}", cfg)
        grads.update(g)
    dpos = np.zeros_like(p["pos"])
    dpos[:h, :w] = dx
    grads["pos"] = dpos
    return dx, grads


def backbone_forward(tg, p, cfg: AttentionConfig):
    """Token indices -> ``(ceil(h/2), ceil(w/2), 2 d_model)`` feature grid."""
    indices = getattr(tg, "indices", tg)
    x = embed_tokens(indices, p)
    return stages_forward(x, p, cfg)[0]
