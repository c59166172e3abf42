"""Segmentation network: tokenizer -> two-stage backbone -> per-cell pixel head.

Also holds the Dice+BCE loss, the Adam training loop over sampled ROIs and
the ``.hhck`` checkpoint format.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention as att
from . import nn, rng, vq
from .errors import ConfigError, FormatError, IoError, NoForeground, ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

TOKENIZER_KEYS = ("enc.w", "enc.b", "codebook", "dec.w", "dec.b")


@dataclass
class ModelConfig:
    patch: int = 16
    codebook_size: int = 1024
    code_dim: int = 256
    d_model: int = 256
    heads: int = 4
    scales: tuple = (1, 2, 4)
    blocks: tuple = (2, 2)
    epsilon: float = 1e-6
    grid: tuple = (135, 240)
    classes: int = 1
    tokenizer: str = "vq"
    attention: str = "relu"
    beta: float = vq.DEFAULT_BETA
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.grid = tuple(int(g) for g in self.grid)
        if self.tokenizer not in ("vq", "linear"):
            raise ConfigError(f"unknown tokenizer {self.tokenizer!r}")
        if self.classes < 1:
            raise ConfigError("classes must be >= 1")
        self.attention_config()

    def attention_config(self) -> att.AttentionConfig:
        return att.AttentionConfig(self.d_model, self.heads, self.scales, self.epsilon,
                                   self.attention, self.blocks)

    @classmethod
    def for_roi(cls, width: int, height: int, **kw) -> "ModelConfig":
        """Config whose positional table fits ``width x height`` inputs."""
        patch = kw.get("patch", 16)
        kw["grid"] = vq.token_grid_shape(height, width, patch)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"], d["blocks"], d["grid"] = list(self.scales), list(self.blocks), list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 0
    batch: int = 1
    seed: int = 0
    loss_mix: float = 0.5
    freeze_tokenizer: bool = False
    sampler: str = "rand"
    level: int = 0
    tokenizer_warmup: int = 0
    tokenizer_lr: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ConfigError("loss_mix must be in [0, 1]")
        if self.sampler not in ("rand", "tile"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")


class BackboneParams:
    """Every learnable tensor of the network plus the optimizer step count."""

    def __init__(self, config: ModelConfig, tensors: dict, step_count: int = 0):
        self.config = config
        self.tensors = tensors
        self.step_count = step_count

    @classmethod
    def initialize(cls, config: ModelConfig, dtype=np.float32) -> "BackboneParams":
        gen = np.random.default_rng(config.seed)
        f, dz, d = config.patch, config.code_dim, config.d_model
        fan_in = f * f * 3
        t = {}
        if config.tokenizer == "vq":
            enc = vq.PatchEncoder.initialize(f, dz, seed=rng.derive_seed(config.seed, 1), dtype=dtype)
            # centre the map on mid-grey so light and dark patches land on opposite sides
            t["enc.w"] = enc.weight
            t["enc.b"] = (-0.5 * enc.weight.sum(axis=0)).astype(dtype)
            t["codebook"] = vq.Codebook.initialize(config.codebook_size, dz,
                                                   seed=rng.derive_seed(config.seed, 2), dtype=dtype).entries
            t["dec.w"] = (gen.standard_normal((dz, fan_in)) / np.sqrt(dz)).astype(dtype)
            t["dec.b"] = np.full(fan_in, 0.5, dtype)
        else:
            t["patch.w"] = (gen.standard_normal((fan_in, d)) * np.sqrt(2.0 / fan_in)).astype(dtype)
            t["patch.b"] = np.zeros(d, dtype)
        t.update(att.init_backbone(gen, config.attention_config(), config.codebook_size, config.grid, dtype))
        if config.tokenizer == "linear":
            del t["embed"]
        d2 = 2 * d
        out = (2 * f) ** 2 * config.classes
        t["head.ln.g"] = np.ones(d2, dtype)
        t["head.ln.b"] = np.zeros(d2, dtype)
        t["head.w"] = (gen.standard_normal((d2, out)) / np.sqrt(d2)).astype(dtype)
        t["head.b"] = np.zeros(out, dtype)
        return cls(config, t, 0)

    def astype(self, dtype) -> "BackboneParams":
        return BackboneParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                              self.step_count)

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.step_count)

    @property
    def encoder(self) -> vq.PatchEncoder:
        return vq.PatchEncoder(self.tensors["enc.w"], self.tensors["enc.b"], self.config.patch)

    @property
    def codebook(self) -> vq.Codebook:
        return vq.Codebook(self.tensors["codebook"], self.config.seed)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BackboneParams):
            return NotImplemented
        return (self.config == other.config and self.step_count == other.step_count
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _as_unit_pixels(patch, dtype):
    patch = np.asarray(patch)
    if patch.dtype == np.uint8:
        return patch.astype(dtype) / dtype(255.0)
    return patch.astype(dtype)


def tokenize(x, params: BackboneParams):
    """Encode + quantise a [0, 1] patch; returns ``(latent, token_grid)``."""
    latent = vq.encode(x, params.encoder)
    return latent, vq.quantize(latent, params.codebook)


def forward_logits(x, params: BackboneParams):
    """Pixel logits ``(H, W, classes)`` for a [0, 1] float patch, with a backward cache."""
    cfg = params.config
    p = params.tensors
    H, W = x.shape[:2]
    tok_cache = None
    if cfg.tokenizer == "vq":
        latent, tg = tokenize(x, params)
        emb = att.embed_tokens(tg.indices, p)
        tok_cache = ("vq", tg.indices, latent.values, tg.quantized)
    else:
        blocks = vq.patchify(x, cfg.patch)
        emb, l_c = nn.linear(blocks, p["patch.w"], p["patch.b"])
        tok_cache = ("linear", l_c)
    feats, s_c = att.stages_forward(emb, p, cfg.attention_config())
    fn, ln_c = nn.layer_norm(feats, p["head.ln.g"], p["head.ln.b"])
    cells, h_c = nn.linear(fn, p["head.w"], p["head.b"])
    pix = nn.depth_to_space(cells, 2 * cfg.patch, cfg.classes)
    logits = pix[:H, :W]
    return logits, (tok_cache, s_c, ln_c, h_c, pix.shape, (H, W))


def backward_logits(dlogits, cache, params: BackboneParams) -> dict:
    cfg = params.config
    p = params.tensors
    tok_cache, s_c, ln_c, h_c, pix_shape, (H, W) = cache
    dpix = np.zeros(pix_shape, dtype=dlogits.dtype)
    dpix[:H, :W] = dlogits
    dcells = nn.space_to_depth(dpix, 2 * cfg.patch)
    grads = {}
    dfn, grads["head.w"], grads["head.b"] = nn.linear_backward(dcells, h_c)
    dfeats, grads["head.ln.g"], grads["head.ln.b"] = nn.layer_norm_backward(dfn, ln_c)
    demb, g = att.stages_backward(dfeats, s_c, p, cfg.attention_config())
    grads.update(g)
    if tok_cache[0] == "vq":
        grads["embed"] = att.embed_tokens_backward(demb, tok_cache[1], p["embed"].shape, p["embed"].dtype)
    else:
        _, grads["patch.w"], grads["patch.b"] = nn.linear_backward(demb, tok_cache[1])
    return grads


def forward(patch, params: BackboneParams) -> np.ndarray:
    """Foreground probability map for an RGB patch (uint8 or [0, 1] floats).

    Returns ``(H, W)`` for a single class, ``(H, W, classes)`` otherwise.
    """
    dtype = params.tensors["head.w"].dtype.type
    x = _as_unit_pixels(patch, dtype)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) patch, got {x.shape}")
    logits, _ = forward_logits(x, params)
    prob = nn.sigmoid(logits)
    return prob[..., 0] if params.config.classes == 1 else prob


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def _soft_dice(p, g):
    num = 2.0 * (p * g).sum() + 1.0
    den = p.sum() + g.sum() + 1.0
    return num / den, num, den


def loss(prob, gt, lam: float = 0.5) -> float:
    """``lam * (1 - soft Dice) + (1 - lam) * BCE`` on probabilities.

    Soft Dice is ``(2 sum(p g) + 1) / (sum(p) + sum(g) + 1)``. BCE terms whose
    coefficient is zero are skipped, so a perfect 0/1 prediction costs 0.
    """
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if prob.shape != gt.shape:
        raise ShapeError(f"prob {prob.shape} vs gt {gt.shape}")
    dice, _, _ = _soft_dice(prob, gt)
    pc = np.clip(prob, 1e-12, 1.0)
    qc = np.clip(1.0 - prob, 1e-12, 1.0)
    bce = -(np.where(gt > 0, gt * np.log(pc), 0.0) + np.where(gt < 1, (1 - gt) * np.log(qc), 0.0)).mean()
    return float(lam * (1.0 - dice) + (1.0 - lam) * bce)


def loss_from_logits(logits, gt, lam: float = 0.5):
    """Loss value and its gradient with respect to the logits (per-class mean)."""
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} vs gt {gt.shape}")
    classes = logits.shape[-1] if logits.ndim == 3 else 1
    l3 = logits.reshape(logits.shape[0], logits.shape[1], classes)
    g3 = gt.reshape(l3.shape).astype(logits.dtype)
    total = 0.0
    dlog = np.empty_like(l3)
    n = l3.shape[0] * l3.shape[1]
    for c in range(classes):
        lc, gc = l3[..., c].astype(np.float64), g3[..., c].astype(np.float64)
        p = nn.sigmoid(lc)
        dice, num, den = _soft_dice(p, gc)
        bce = (np.logaddexp(0.0, lc) - gc * lc).mean()
        total += lam * (1.0 - dice) + (1.0 - lam) * bce
        ddice_dp = (2.0 * gc * den - num) / den**2
        grad = -lam * ddice_dp * p * (1.0 - p) + (1.0 - lam) * (p - gc) / n
        dlog[..., c] = grad / classes
    return total / classes, dlog.reshape(logits.shape)


# --------------------------------------------------------------------------
# tokenizer objective
# --------------------------------------------------------------------------

def tokenizer_loss_and_grads(x, params: BackboneParams):
    """Reconstruction + codebook + commitment loss of the VQ tokenizer.

    Per cell: ``|G(z_q) - x|^2 / (f*f*3) + |sg(z_hat) - z_q|^2 + beta |z_hat - sg(z_q)|^2``,
    averaged over cells. The encoder sees the reconstruction gradient through
    the straight-through copy.
    """
    cfg = params.config
    p = params.tensors
    f = cfg.patch
    blocks = vq.patchify(x, f)
    hh, ww, m = blocks.shape
    n = hh * ww
    z_hat = blocks @ p["enc.w"] + p["enc.b"]
    idx = vq.nearest_indices(z_hat.reshape(n, -1), p["codebook"]).reshape(hh, ww)
    z_q = p["codebook"][idx]
    recon = z_q @ p["dec.w"] + p["dec.b"]
    diff = recon - blocks
    rec = float((diff * diff).sum() / (n * m))
    gap = z_hat - z_q
    gap2 = float((gap * gap).sum() / n)
    total = rec + (1.0 + cfg.beta) * gap2

    drecon = 2.0 * diff / (n * m)
    grads = {
        "dec.w": z_q.reshape(n, -1).T @ drecon.reshape(n, m),
        "dec.b": drecon.reshape(n, m).sum(axis=0),
    }
    dzq = drecon @ p["dec.w"].T
    # codebook loss pulls entries with weight 2/n; commitment pulls the encoder with 2*beta/n
    dz_hat, grads["codebook"] = vq.straight_through_grad(dzq, z_hat, z_q, idx, cfg.codebook_size, beta=2.0 / n)
    dz_hat = dz_hat + (2.0 * cfg.beta / n) * gap
    grads["enc.w"] = blocks.reshape(n, m).T @ dz_hat.reshape(n, -1)
    grads["enc.b"] = dz_hat.reshape(n, -1).sum(axis=0)
    return total, rec, grads


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, tensors: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for k in sorted(grads):
            g = grads[k]
            if g is None:
                continue
            w = tensors[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(w)
                self.v[k] = np.zeros_like(w)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            step = lr * math.sqrt(1 - self.beta2**t) / (1 - self.beta1**t)
            w -= (step * m / (np.sqrt(v) + self.eps)).astype(w.dtype)


@dataclass
class TrainingSlide:
    """One training WSI: pyramid, per-class ground truth at the sampling level, foreground."""

    image: object
    gt: object
    foreground: object


def prepare_slides(pyramids, gt_masks, level: int):
    from .foreground import compute_foreground
    from .inference import mask_at_level

    slides = []
    for img, gt in zip(pyramids, gt_masks):
        w, h = img.level_dims(level)
        per_class = [mask_at_level(m, level) for m in (gt if isinstance(gt, (list, tuple)) else [gt])]
        for m in per_class:
            if (m.width, m.height) != (w, h):
                raise ShapeError(f"ground truth {m.width}x{m.height} vs level {level} {w}x{h}")
        slides.append(TrainingSlide(img, per_class, compute_foreground(img, level)))
    return slides


class RoiStream:
    """Deterministic sequence of ``(slide index, TileRef)`` training ROIs."""

    def __init__(self, slides, sampler_cfg, train_cfg: TrainConfig):
        from .foreground import RoiSampler, foreground_tiles, tile_plan

        self.slides = slides
        self.cfg = sampler_cfg
        self.mode = train_cfg.sampler
        self.seed = train_cfg.seed
        if self.mode == "rand":
            self.samplers = []
            for i, s in enumerate(slides):
                cfg_i = type(sampler_cfg)(sampler_cfg.roi_width, sampler_cfg.roi_height,
                                          sampler_cfg.min_foreground_fraction,
                                          rng.derive_seed(sampler_cfg.seed, i))
                self.samplers.append(RoiSampler(s.foreground, cfg_i))
        else:
            self.tiles = []
            for i, s in enumerate(slides):
                plan = tile_plan(s.foreground.width, s.foreground.height,
                                 sampler_cfg.roi_width, sampler_cfg.roi_height, 0, level=s.foreground.level)
                kept = foreground_tiles(plan, s.foreground, sampler_cfg.min_foreground_fraction)
                self.tiles.extend((i, t) for t in kept)
            if not self.tiles:
                raise NoForeground("no grid tile meets the foreground fraction")

    def __getitem__(self, step: int):
        if self.mode == "rand":
            pick = int(rng.stream(rng.derive_seed(self.seed, 7), step).integers(len(self.slides)))
            return pick, self.samplers[pick].draw(step)
        epoch, pos = divmod(step, len(self.tiles))
        order = rng.stream(rng.derive_seed(self.seed, 11), epoch).permutation(len(self.tiles))
        return self.tiles[int(order[pos])]


def _tokenizer_step(params, opt, x, lr):
    total, _, grads = tokenizer_loss_and_grads(x, params)
    if not (math.isfinite(total) and all(np.all(np.isfinite(g)) for g in grads.values())):
        raise TrainingDiverged("tokenizer loss diverged", checkpoint=params.copy())
    opt.step(params.tensors, grads, lr=lr)
    return total


def train(pyramids, gt_masks, cfg: TrainConfig, sampler, model_cfg: ModelConfig | None = None,
          params: BackboneParams | None = None, history: list | None = None,
          log_every: int = 0) -> BackboneParams:
    """Train on ROIs drawn online from the given slides.

    Every step draws a fresh ROI (``rand``) or the next tile of a fixed
    foreground tile grid (``tile``), reads pixels and the matching
    ground-truth crop, and applies one Adam update. With a VQ tokenizer that
    is not frozen, the tokenizer objective is optimised on the same ROI, and
    the first ``tokenizer_warmup`` draws train the tokenizer alone.
    """
    if model_cfg is None:
        model_cfg = ModelConfig.for_roi(sampler.roi_width, sampler.roi_height)
    if params is None:
        params = BackboneParams.initialize(model_cfg)
    params = params.copy()
    if cfg.steps == 0:
        return params

    slides = prepare_slides(pyramids, gt_masks, cfg.level)
    stream = RoiStream(slides, sampler, cfg)
    opt = Adam(cfg.lr)
    tok_opt = Adam(cfg.tokenizer_lr)
    dtype = params.tensors["head.w"].dtype.type
    train_tokenizer = params.config.tokenizer == "vq" and not cfg.freeze_tokenizer

    def roi(k):
        slide_i, tile = stream[k]
        s = slides[slide_i]
        x = s.image.read_region(tile.region()).astype(dtype) / dtype(255.0)
        return x, s, tile

    if train_tokenizer:
        for k in range(cfg.tokenizer_warmup):
            x, _, _ = roi(cfg.steps + k)
            _tokenizer_step(params, tok_opt, x, cfg.tokenizer_lr)

    for step in range(cfg.steps):
        x, s, tile = roi(step)
        gt = np.stack([m.crop(tile.x, tile.y, tile.width, tile.height) for m in s.gt], axis=-1).astype(dtype)
        if gt.shape[-1] != params.config.classes:
            raise ShapeError(f"{gt.shape[-1]} ground-truth masks for {params.config.classes} classes")
        logits, cache = forward_logits(x, params)
        value, dlogits = loss_from_logits(logits, gt, cfg.loss_mix)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {params.step_count}", checkpoint=params.copy())
        grads = backward_logits(dlogits.astype(dtype), cache, params)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite gradient at step {params.step_count}", checkpoint=params.copy())
        opt.step(params.tensors, grads)
        if train_tokenizer:
            _tokenizer_step(params, tok_opt, x, cfg.tokenizer_lr)
        params.step_count += 1
        if history is not None:
            history.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, value)
    return params


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HHCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: BackboneParams, path, extra: dict | None = None) -> None:
    """Write ``params`` atomically (temp file + rename).

    Layout (little-endian): magic, u16 version, u32 config-JSON length, JSON,
    u64 step count, u32 tensor count, then per tensor: u16 name length, name,
    u8 rank, u64 dims, float32 payload.
    """
    path = Path(path)
    config = {"model": params.config.to_dict()}
    if extra:
        config.update(extra)
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<QI", params.step_count, len(params.tensors))]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        encoded = name.encode()
        parts.append(struct.pack("<HB", len(encoded), arr.ndim) + encoded)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            for part in parts:
                fh.write(part)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> BackboneParams:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a holoslide checkpoint")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        config = json.loads(data[pos:pos + n])
        pos += n
        step_count, count = struct.unpack_from("<QI", data, pos)
        pos += 12
        tensors = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return BackboneParams(ModelConfig.from_dict(config["model"]), tensors, step_count)
