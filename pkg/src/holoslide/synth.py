"""Synthetic slides: bright glass, tissue blobs, dark target disks inside tissue.

The generator knows exactly which pixels belong to a target disk, so it
doubles as the ground truth for training and evaluation runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, InvalidInput
from .masks import WsiMask, save_wsi_mask
from .pyramid import import_image

# RGB triples whose luminance is (about) the nominal grey level
_TISSUE_TINT = np.array([25, -15, 15])
_TARGET_TINT = np.array([30, -15, 10])


@dataclass
class SynthSlideSpec:
    width: int = 4096
    height: int = 4096
    disk_count: int = 16
    disk_radius: tuple = (64, 128)
    background: int = 245
    tissue: int = 140
    target: int = 90
    tissue_blobs: int = 4
    noise: float = 6.0
    seed: int = 0


def _tint(level: int, tint: np.ndarray) -> np.ndarray:
    rgb = np.clip(level + tint, 0, 255)
    # shift so that 0.299 R + 0.587 G + 0.114 B lands on the nominal level
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    return np.clip(np.rint(rgb + (level - lum)), 0, 255).astype(np.int16)


def _ellipses(gen, spec):
    out = []
    for _ in range(max(1, spec.tissue_blobs)):
        cx, cy = gen.uniform(0.2, 0.8) * spec.width, gen.uniform(0.2, 0.8) * spec.height
        ax, ay = gen.uniform(0.18, 0.35) * spec.width, gen.uniform(0.18, 0.35) * spec.height
        out.append((cx, cy, ax, ay))
    return out


def _in_tissue(xs, ys, ellipses):
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    for cx, cy, ax, ay in ellipses:
        inside |= ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    return inside


def _disk_offsets(r: int):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = xx * xx + yy * yy <= r * r
    return xx[keep], yy[keep]


def place_disks(spec: SynthSlideSpec, gen, ellipses, max_tries: int = 200):
    """Non-overlapping disks that lie entirely inside tissue."""
    disks = []
    rmin, rmax = spec.disk_radius
    tries = 0
    while len(disks) < spec.disk_count:
        tries += 1
        if tries > max_tries * max(1, spec.disk_count):
            raise GenerationError(f"placed {len(disks)} of {spec.disk_count} disks before giving up")
        r = int(gen.integers(rmin, rmax + 1))
        cx = int(gen.integers(r, spec.width - r))
        cy = int(gen.integers(r, spec.height - r))
        if any((cx - x) ** 2 + (cy - y) ** 2 <= (r + q + 2) ** 2 for x, y, q in disks):
            continue
        dx, dy = _disk_offsets(r)
        if not _in_tissue(cx + dx, cy + dy, ellipses).all():
            continue
        disks.append((cx, cy, r))
    return disks


def render_synth(spec: SynthSlideSpec):
    """Return ``(pixels, gt_bits, disks)`` for ``spec``; fully determined by ``spec.seed``."""
    if spec.width < 512 or spec.height < 512:
        raise InvalidInput("synthetic slides must be at least 512x512")
    rmin, rmax = spec.disk_radius
    if rmin < 1 or rmax < rmin or 2 * rmax + 2 > min(spec.width, spec.height):
        raise InvalidInput(f"bad disk radius range {spec.disk_radius}")
    gen = np.random.default_rng(spec.seed)
    ellipses = _ellipses(gen, spec)
    disks = place_disks(spec, gen, ellipses)

    h, w = spec.height, spec.width
    gt = np.zeros((h, w), dtype=bool)
    for cx, cy, r in disks:
        dx, dy = _disk_offsets(r)
        gt[cy + dy, cx + dx] = True

    bg = np.full(3, spec.background, dtype=np.int16)
    tissue = _tint(spec.tissue, _TISSUE_TINT)
    target = _tint(spec.target, _TARGET_TINT)
    pixels = np.empty((h, w, 3), dtype=np.uint8)
    xs = np.arange(w, dtype=np.float64)[None, :]
    band = 256
    for y0 in range(0, h, band):
        y1 = min(h, y0 + band)
        ys = np.arange(y0, y1, dtype=np.float64)[:, None]
        tis = _in_tissue(xs, ys, ellipses)
        base = np.where(tis[..., None], tissue, bg).astype(np.int16)
        base[gt[y0:y1]] = target
        if spec.noise > 0:
            base = base + np.rint(gen.normal(0.0, spec.noise, size=(y1 - y0, w, 1))).astype(np.int16)
        pixels[y0:y1] = np.clip(base, 0, 255).astype(np.uint8)
    return pixels, gt, disks


def generate_synth(spec: SynthSlideSpec, path, tile_size: int = 512):
    """Render ``spec`` and write it as a pyramid at ``path``; returns ``(PyramidImage, WsiMask)``."""
    pixels, gt, _ = render_synth(spec)
    img = import_image(pixels, path, tile_size)
    return img, WsiMask.from_dense(gt, level=0)


def write_synth_dataset(out_dir, count: int, base: SynthSlideSpec, tile_size: int = 512, prefix: str = "slide"):
    """Write ``count`` slides (seeds ``base.seed + i``) with ``.hhpy`` + ``.mask`` pairs."""
    from dataclasses import replace
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        spec = replace(base, seed=base.seed + i)
        stem = out_dir / f"{prefix}{i:03d}"
        img, gt = generate_synth(spec, stem.with_suffix(".hhpy"), tile_size)
        save_wsi_mask(gt, stem.with_suffix(".mask"))
        written.append((img, gt))
    return written
