"""Whole-slide inference: tile, predict, blend overlaps, stitch into a WSI mask."""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, DegenerateHistogram, ShapeError
from .foreground import ForegroundMask, TileRef, compute_foreground, foreground_tiles, tile_plan
from .masks import RunEncoder, WsiMask

log = logging.getLogger(__name__)

CHUNK = 512
OVERLAY_FILL = np.array([0, 200, 0], dtype=np.uint16)
OVERLAY_EDGE = np.array([0, 255, 0], dtype=np.uint8)


@dataclass
class TileConfig:
    tile_width: int = 3840
    tile_height: int = 2160
    overlap: int = 0
    min_fg_fraction: float = 0.0


def _axis_coverage(extent: int, anchors: list[int], size: int) -> np.ndarray:
    cover = np.zeros(extent + 1, dtype=np.int32)
    for a in anchors:
        cover[a] += 1
        cover[a + size] -= 1
    return np.cumsum(cover[:-1])


class ProbAccumulator:
    """Per-pixel probability sums over a level, allocated in 512x512 chunks on first touch.

    Sums are float64. Counts are not stored: the tile plan is a full grid, so
    the number of tiles covering a pixel is the product of its row and column
    coverage, and every planned tile counts once whether inferred or skipped.
    """

    def __init__(self, width: int, height: int, plan: list[TileRef]):
        self.width, self.height = width, height
        xs = sorted({t.x for t in plan})
        ys = sorted({t.y for t in plan})
        tw, th = plan[0].width, plan[0].height
        self.col_count = _axis_coverage(width, xs, tw)
        self.row_count = _axis_coverage(height, ys, th)
        if self.col_count.min() < 1 or self.row_count.min() < 1:
            raise ShapeError("tile plan leaves pixels uncovered")
        self.chunks: dict[tuple[int, int], np.ndarray] = {}

    def add(self, tile: TileRef, probs: np.ndarray) -> None:
        x0, y0 = tile.x, tile.y
        x1, y1 = x0 + tile.width, y0 + tile.height
        for cy in range(y0 // CHUNK, (y1 - 1) // CHUNK + 1):
            for cx in range(x0 // CHUNK, (x1 - 1) // CHUNK + 1):
                key = (cy, cx)
                chunk = self.chunks.get(key)
                if chunk is None:
                    ch = min(CHUNK, self.height - cy * CHUNK)
                    cw = min(CHUNK, self.width - cx * CHUNK)
                    chunk = self.chunks[key] = np.zeros((ch, cw), dtype=np.float64)
                sx0, sy0 = max(x0, cx * CHUNK), max(y0, cy * CHUNK)
                sx1 = min(x1, cx * CHUNK + chunk.shape[1])
                sy1 = min(y1, cy * CHUNK + chunk.shape[0])
                chunk[sy0 - cy * CHUNK:sy1 - cy * CHUNK, sx0 - cx * CHUNK:sx1 - cx * CHUNK] += \
                    probs[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]

    def probability_band(self, y0: int, y1: int) -> np.ndarray:
        """Blended probabilities for rows ``[y0, y1)``; ``y0`` must be chunk-aligned."""
        band = np.zeros((y1 - y0, self.width), dtype=np.float64)
        cy = y0 // CHUNK
        for cx in range(-(-self.width // CHUNK)):
            chunk = self.chunks.get((cy, cx))
            if chunk is not None:
                band[:, cx * CHUNK:cx * CHUNK + chunk.shape[1]] = chunk
        counts = np.outer(self.row_count[y0:y1], self.col_count).astype(np.float64)
        return band / counts

    def probabilities(self) -> np.ndarray:
        return np.concatenate([self.probability_band(y, min(y + CHUNK, self.height))
                               for y in range(0, self.height, CHUNK)])

    def to_mask(self, level: int, threshold: float) -> WsiMask:
        enc = RunEncoder()
        for y in range(0, self.height, CHUNK):
            enc.push(self.probability_band(y, min(y + CHUNK, self.height)) >= threshold)
        return WsiMask(level, self.width, self.height, enc.finish())


def model_predictor(params):
    """Wrap trained parameters as a ``(pixels, tile) -> probabilities`` callable."""
    from .model import forward

    def predict(pixels, tile):
        prob = forward(pixels, params)
        return prob if prob.ndim == 2 else prob[..., 0]

    return predict


def _resolve_foreground(img, level, tile_cfg, foreground):
    if tile_cfg.min_fg_fraction <= 0:
        return None
    if foreground is not None:
        return foreground
    try:
        return compute_foreground(img, level)
    except DegenerateHistogram as exc:
        log.warning("%s; every tile counts as background", exc)
        return exc.mask


def infer_wsi(img, level: int, model, tile_cfg: TileConfig, threshold: float = 0.5, workers: int = 1,
              foreground: ForegroundMask | None = None, return_probabilities: bool = False):
    """Segment one pyramid level tile by tile and stitch the result.

    ``model`` is either trained parameters or any ``predict(pixels, tile)``
    callable returning a ``(tile_height, tile_width)`` probability map. Tiles
    below ``tile_cfg.min_fg_fraction`` foreground are not run and count as
    probability 0. Overlaps are averaged. Predictions run on ``workers``
    threads but are accumulated strictly in plan order, so the mask does not
    depend on scheduling. Any failing tile aborts the run.
    """
    if not callable(model):
        model = model_predictor(model)
    width, height = img.level_dims(level)
    tw, th = min(tile_cfg.tile_width, width), min(tile_cfg.tile_height, height)
    overlap = min(tile_cfg.overlap, min(tw, th) - 1)
    plan = tile_plan(width, height, tw, th, overlap, level=level)
    fg = _resolve_foreground(img, level, tile_cfg, foreground)
    keep = set(plan) if fg is None else set(foreground_tiles(plan, fg, tile_cfg.min_fg_fraction))
    work = [t for t in plan if t in keep]
    log.info("level %d: %d tiles planned, %d with foreground", level, len(plan), len(work))

    acc = ProbAccumulator(width, height, plan)

    def run(tile):
        probs = np.asarray(model(img.read_region(tile.region()), tile))
        if probs.shape != (tile.height, tile.width):
            raise ShapeError(f"prediction {probs.shape} for tile {tile.width}x{tile.height}")
        return probs

    if workers <= 1:
        for tile in work:
            acc.add(tile, run(tile))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = deque()
            it = iter(work)
            for tile in it:
                pending.append((tile, pool.submit(run, tile)))
                if len(pending) >= 2 * workers:
                    t, fut = pending.popleft()
                    acc.add(t, fut.result())
            while pending:
                t, fut = pending.popleft()
                acc.add(t, fut.result())

    mask = acc.to_mask(level, threshold)
    if return_probabilities:
        return mask, acc
    return mask


def mask_at_level(mask: WsiMask, level: int) -> WsiMask:
    """Nearest-neighbour (top-left sample) copy of ``mask`` at a coarser level."""
    if level == mask.level:
        return mask
    if level < mask.level:
        raise BoundsError(f"cannot upsample a level-{mask.level} mask to level {level}")
    s = 1 << (level - mask.level)
    w, h = -(-mask.width // s), -(-mask.height // s)
    enc = RunEncoder()
    band = s * max(1, CHUNK // s)
    for y0 in range(0, mask.height, band):
        rows = mask.crop(0, y0, mask.width, min(band, mask.height - y0))
        enc.push(rows[::s, ::s])
    return WsiMask(level, w, h, enc.finish())


def export_overlay(img, mask: WsiMask, out_level: int) -> np.ndarray:
    """Slide raster at ``out_level`` with the mask blended in green and its boundary drawn solid."""
    if out_level < mask.level:
        raise BoundsError(f"overlay level {out_level} finer than mask level {mask.level}")
    w, h = img.level_dims(out_level)
    m = mask_at_level(mask, out_level)
    if (m.width, m.height) != (w, h):
        raise BoundsError(f"mask {m.width}x{m.height} does not match level {out_level} {w}x{h}")
    raster = img.read_level(out_level).copy()
    bits = m.to_dense()
    if not bits.any():
        return raster
    blended = (raster[bits].astype(np.uint16) + OVERLAY_FILL + 1) // 2
    raster[bits] = blended.astype(np.uint8)
    padded = np.pad(bits, 1, mode="constant", constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    raster[bits & ~interior] = OVERLAY_EDGE
    return raster
