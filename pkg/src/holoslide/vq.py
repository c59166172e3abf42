"""Patch tokenizer: linear patch encoder, nearest-code quantisation, linear decoder.

An RGB patch in [0, 1] is reflect-padded to a multiple of the patch factor
``f``, cut into ``f x f x 3`` blocks, projected to ``d_z`` dims and snapped to
the closest codebook row (squared Euclidean distance, lowest index on ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCodebook, NumericalError, ShapeError

DEFAULT_BETA = 0.25


@dataclass
class Codebook:
    entries: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries)
        if self.entries.ndim != 2:
            raise InvalidCodebook(f"codebook must be (K, d_z), got {self.entries.shape}")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initialize(cls, size: int = 1024, dim: int = 256, seed: int = 0, dtype=np.float32) -> "Codebook":
        """Seeded ``uniform(-1/sqrt(d_z), 1/sqrt(d_z))`` entries."""
        if size < 2:
            raise InvalidCodebook("a codebook needs at least 2 entries")
        bound = 1.0 / np.sqrt(dim)
        gen = np.random.default_rng(seed)
        entries = gen.uniform(-bound, bound, size=(size, dim)).astype(dtype)
        if len(np.unique(entries, axis=0)) != size:
            raise InvalidCodebook("initial codebook entries are not distinct")
        return cls(entries, seed)


@dataclass
class PatchEncoder:
    weight: np.ndarray
    bias: np.ndarray
    factor: int = 16

    @classmethod
    def initialize(cls, factor: int = 16, dim: int = 256, seed: int = 0, dtype=np.float32) -> "PatchEncoder":
        gen = np.random.default_rng(seed)
        fan_in = factor * factor * 3
        weight = (gen.standard_normal((fan_in, dim)) / np.sqrt(fan_in)).astype(dtype)
        return cls(weight, np.zeros(dim, dtype), factor)


@dataclass
class LatentGrid:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape[:2]

    @property
    def depth(self) -> int:
        return self.values.shape[2]


@dataclass
class TokenGrid:
    indices: np.ndarray
    quantized: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.indices.shape


def token_grid_shape(height: int, width: int, factor: int) -> tuple[int, int]:
    return -(-height // factor), -(-width // factor)


def patchify(x: np.ndarray, factor: int) -> np.ndarray:
    """``(H, W, 3)`` -> ``(ceil(H/f), ceil(W/f), f*f*3)``, reflect-padding the far edges."""
    h, w, c = x.shape
    if h < factor or w < factor:
        raise ShapeError(f"patch {h}x{w} smaller than factor {factor}")
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    hh, ww = x.shape[0] // factor, x.shape[1] // factor
    return x.reshape(hh, factor, ww, factor, c).transpose(0, 2, 1, 3, 4).reshape(hh, ww, factor * factor * c)


def unpatchify(blocks: np.ndarray, factor: int, channels: int = 3) -> np.ndarray:
    hh, ww, _ = blocks.shape
    return (blocks.reshape(hh, ww, factor, factor, channels)
            .transpose(0, 2, 1, 3, 4).reshape(hh * factor, ww * factor, channels))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite tokenizer weights")


def encode(x: np.ndarray, enc: PatchEncoder) -> LatentGrid:
    _check_finite(enc.weight, enc.bias)
    blocks = patchify(np.asarray(x, dtype=enc.weight.dtype), enc.factor)
    return LatentGrid(blocks @ enc.weight + enc.bias)


def nearest_code(v: np.ndarray, cb: Codebook) -> tuple[int, float]:
    """Index and Euclidean distance of the closest codebook entry (lowest index on ties)."""
    if cb.entries.shape[0] == 0:
        raise InvalidCodebook("empty codebook")
    v = np.asarray(v)
    if v.shape != (cb.dim,):
        raise ShapeError(f"vector of shape {v.shape} vs codebook dim {cb.dim}")
    d2 = ((cb.entries.astype(np.float64) - v.astype(np.float64)) ** 2).sum(axis=1)
    k = int(np.argmin(d2))
    return k, float(np.sqrt(d2[k]))


def nearest_indices(flat: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest-entry index per row of ``flat``.

    Distances come from the ``|z|^2 - 2 z.c + |c|^2`` expansion; rows whose
    runner-up is within rounding of the winner are re-decided with direct
    differences so ties resolve to the lowest index exactly.
    """
    z = flat.astype(np.float64)
    c = entries.astype(np.float64)
    d2 = (z * z).sum(1)[:, None] - 2.0 * (z @ c.T) + (c * c).sum(1)[None, :]
    best = d2.min(axis=1)
    scale = (z * z).sum(1) + (c * c).sum(1).max() + 1.0
    near = d2 <= (best + 1e-9 * scale)[:, None]
    idx = np.argmax(near, axis=1)
    ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
    for r in ambiguous:
        cand = np.flatnonzero(near[r])
        direct = ((c[cand] - z[r]) ** 2).sum(axis=1)
        idx[r] = cand[np.argmin(direct)]
    return idx


def quantize(z: LatentGrid, cb: Codebook) -> TokenGrid:
    values = z.values if isinstance(z, LatentGrid) else np.asarray(z)
    if cb.size == 0:
        raise InvalidCodebook("empty codebook")
    if values.shape[-1] != cb.dim:
        raise ShapeError(f"latent depth {values.shape[-1]} vs codebook dim {cb.dim}")
    h, w, d = values.shape
    idx = nearest_indices(values.reshape(-1, d), cb.entries).reshape(h, w)
    return TokenGrid(idx, cb.entries[idx])


def reconstruct(t: TokenGrid, dec_weight: np.ndarray, dec_bias: np.ndarray, factor: int,
                out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Expand every quantised token linearly to an ``f x f x 3`` block."""
    q = t.quantized
    if q.shape[-1] != dec_weight.shape[0]:
        raise ShapeError(f"token depth {q.shape[-1]} vs decoder input {dec_weight.shape[0]}")
    if dec_weight.shape[1] != factor * factor * 3:
        raise ShapeError("decoder output does not match the patch factor")
    img = unpatchify(q @ dec_weight + dec_bias, factor)
    if out_shape is not None:
        img = img[:out_shape[0], :out_shape[1]]
    return img


def straight_through_grad(upstream: np.ndarray, z_hat: np.ndarray, z_q: np.ndarray,
                          indices: np.ndarray, codebook_size: int, beta: float = DEFAULT_BETA):
    """Gradients across the quantiser.

    Returns ``(grad_z_hat, grad_codebook)``. The upstream gradient on ``z_q``
    passes to ``z_hat`` unchanged. Each codebook row gets minus the commitment
    pull ``beta * (z_hat - z_q)`` summed over the cells that chose it, so a
    descent step moves entries toward the latents they serve.
    """
    pull = beta * (z_hat - z_q)
    grad_cb = np.zeros((codebook_size, z_hat.shape[-1]), dtype=z_hat.dtype)
    np.add.at(grad_cb, np.asarray(indices).ravel(), -pull.reshape(-1, z_hat.shape[-1]))
    return upstream.copy(), grad_cb
