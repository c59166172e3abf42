"""Tissue detection, random ROI sampling and inference tile plans."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import rng
from .errors import BoundsError, ConfigError, DegenerateHistogram, InvalidTiling, NoForeground
from .masks import FOREGROUND_MAGIC, bits_from_runs, read_mask_file, runs_from_bits, write_mask_file
from .pyramid import PyramidImage, Region

MAX_REJECTION_DRAWS = 10_000
_BATCH = 256


@dataclass(frozen=True)
class TileRef:
    level: int
    x: int
    y: int
    width: int
    height: int

    def region(self) -> Region:
        return Region(self.level, self.x, self.y, self.width, self.height)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplerConfig:
    roi_width: int = 3840
    roi_height: int = 2160
    min_foreground_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.roi_width < 1 or self.roi_height < 1:
            raise ConfigError("ROI dimensions must be positive")
        if not 0.0 < self.min_foreground_fraction <= 1.0:
            raise ConfigError("min_foreground_fraction must be in (0, 1]")


def luminance(pixels: np.ndarray) -> np.ndarray:
    """``round(0.299 R + 0.587 G + 0.114 B)`` as uint8, halves rounded up."""
    p = pixels.astype(np.int32)
    return ((299 * p[..., 0] + 587 * p[..., 1] + 114 * p[..., 2] + 500) // 1000).astype(np.uint8)


def otsu_threshold(hist) -> tuple[int, bool]:
    """Otsu threshold of a 256-bin histogram.

    Classes are ``value < t`` and ``value >= t`` for ``t`` in ``1..255``. The
    between-class variance is compared exactly (rational arithmetic), ties go
    to the lowest ``t``. Returns ``(t, degenerate)``; ``degenerate`` is true
    when no threshold separates anything, in which case ``t`` is 0.
    """
    hist = [int(v) for v in np.asarray(hist).ravel()]
    if len(hist) != 256:
        raise ValueError("histogram must have 256 bins")
    total = sum(hist)
    total_sum = sum(i * c for i, c in enumerate(hist))
    best_t, best = 0, Fraction(0)
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += hist[t - 1]
        s0 += (t - 1) * hist[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # w0 w1 (mu0 - mu1)^2 up to the constant factor 1 / total^2
        var = Fraction((total * s0 - n0 * total_sum) ** 2, n0 * n1 * total)
        if var > best:
            best, best_t = var, t
    return best_t, best == 0


@dataclass
class ForegroundMask:
    level: int
    width: int
    height: int
    bits: np.ndarray = field(repr=False)
    threshold_used: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValueError(f"bits shape {self.bits.shape} does not match {self.width}x{self.height}")
        self._integral = None

    @property
    def integral(self) -> np.ndarray:
        if self._integral is None:
            dtype = np.int32 if self.width * self.height < 2**31 else np.int64
            sat = np.zeros((self.height + 1, self.width + 1), dtype=dtype)
            np.cumsum(self.bits, axis=0, dtype=dtype, out=sat[1:, 1:])
            np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
            self._integral = sat
        return self._integral

    def count(self, x, y, w, h):
        """Foreground pixel count of window(s) with top-left ``(x, y)``; vectorised over x, y."""
        s = self.integral
        return s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x]

    def fraction(self, tile: TileRef) -> float:
        x0, y0, x1, y1 = _project(tile, self.level)
        x1, y1 = min(x1, self.width), min(y1, self.height)
        area = (x1 - x0) * (y1 - y0)
        if area <= 0:
            return 0.0
        return float(self.count(x0, y0, x1 - x0, y1 - y0)) / area

    def foreground_fraction(self) -> float:
        return float(self.bits.mean())

    def save(self, path) -> None:
        write_mask_file(path, runs_from_bits(self.bits), self.level, self.width, self.height, FOREGROUND_MAGIC)

    @classmethod
    def load(cls, path) -> "ForegroundMask":
        _, level, width, height, runs = read_mask_file(path, FOREGROUND_MAGIC)
        bits = bits_from_runs(runs, width * height).reshape(height, width)
        return cls(level, width, height, bits, threshold_used=0)


def _project(tile: TileRef, level: int) -> tuple[int, int, int, int]:
    """Tile extent in the pixel grid of ``level`` (covering, not shrinking)."""
    shift = tile.level - level
    if shift >= 0:
        s = 1 << shift
        return tile.x * s, tile.y * s, (tile.x + tile.width) * s, (tile.y + tile.height) * s
    s = 1 << -shift
    return tile.x // s, tile.y // s, -(-(tile.x + tile.width) // s), -(-(tile.y + tile.height) // s)


def _level_bands(img: PyramidImage, level: int):
    w, h = img.level_dims(level)
    step = img.tile_size
    for y in range(0, h, step):
        bh = min(step, h - y)
        yield y, luminance(img.read_region(Region(level, 0, y, w, bh)))


def compute_foreground(img: PyramidImage, level: int) -> ForegroundMask:
    """Otsu foreground mask of one pyramid level; tissue is darker than glass.

    Raises DegenerateHistogram (carrying the all-background mask) when the
    level has no class separation, e.g. a uniformly white slide.
    """
    w, h = img.level_dims(level)
    hist = np.zeros(256, dtype=np.int64)
    for _, gray in _level_bands(img, level):
        hist += np.bincount(gray.ravel(), minlength=256)
    t, degenerate = otsu_threshold(hist)
    if degenerate:
        mask = ForegroundMask(level, w, h, np.zeros((h, w), dtype=bool), threshold_used=0)
        raise DegenerateHistogram(f"level {level} has a uniform histogram", mask=mask)
    bits = np.empty((h, w), dtype=bool)
    for y, gray in _level_bands(img, level):
        np.less(gray, t, out=bits[y:y + gray.shape[0]])
    return ForegroundMask(level, w, h, bits, threshold_used=t)


class RoiSampler:
    """Draws fixed-size ROIs whose foreground fraction meets a floor.

    Draw ``k`` uses its own counter-based stream keyed by ``(cfg.seed, k)``:
    rejection sampling over uniform top-left anchors, at most
    ``MAX_REJECTION_DRAWS`` proposals, then an exhaustive scan of every
    anchor. Workers sampling in parallel should own disjoint index ranges.
    """

    def __init__(self, mask: ForegroundMask, cfg: SamplerConfig):
        if cfg.roi_width > mask.width or cfg.roi_height > mask.height:
            raise ConfigError(
                f"ROI {cfg.roi_width}x{cfg.roi_height} larger than level {mask.width}x{mask.height}"
            )
        self.mask = mask
        self.cfg = cfg
        self.span_x = mask.width - cfg.roi_width + 1
        self.span_y = mask.height - cfg.roi_height + 1
        area = cfg.roi_width * cfg.roi_height
        # smallest integer count meeting the fraction, immune to float rounding
        need = int(np.ceil(cfg.min_foreground_fraction * area))
        while need > 0 and (need - 1) / area >= cfg.min_foreground_fraction:
            need -= 1
        while need / area < cfg.min_foreground_fraction:
            need += 1
        self.need = need
        self._valid = None

    def _accepts(self, xs, ys):
        return self.mask.count(xs, ys, self.cfg.roi_width, self.cfg.roi_height) >= self.need

    def valid_anchors(self) -> np.ndarray:
        """Flat row-major indices of every acceptable anchor (computed once)."""
        if self._valid is None:
            s = self.mask.integral
            rw, rh = self.cfg.roi_width, self.cfg.roi_height
            counts = (s[rh:, rw:] - s[:-rh, rw:] - s[rh:, :-rw] + s[:-rh, :-rw])
            self._valid = np.flatnonzero(counts >= self.need)
        return self._valid

    def draw(self, draw_index: int) -> TileRef:
        gen = rng.stream(self.cfg.seed, draw_index)
        drawn = 0
        while drawn < MAX_REJECTION_DRAWS:
            n = min(_BATCH, MAX_REJECTION_DRAWS - drawn)
            xs = gen.integers(0, self.span_x, size=n)
            ys = gen.integers(0, self.span_y, size=n)
            ok = np.flatnonzero(self._accepts(xs, ys))
            if len(ok):
                k = ok[0]
                return self._ref(int(xs[k]), int(ys[k]))
            drawn += n
        valid = self.valid_anchors()
        if len(valid) == 0:
            raise NoForeground(
                f"no {self.cfg.roi_width}x{self.cfg.roi_height} window reaches "
                f"{self.cfg.min_foreground_fraction:.3f} foreground"
            )
        flat = int(valid[gen.integers(0, len(valid))])
        return self._ref(flat % self.span_x, flat // self.span_x)

    def _ref(self, x: int, y: int) -> TileRef:
        return TileRef(self.mask.level, x, y, self.cfg.roi_width, self.cfg.roi_height)


def sample_roi(mask: ForegroundMask, cfg: SamplerConfig, draw_index: int = 0) -> TileRef:
    return RoiSampler(mask, cfg).draw(draw_index)


def _axis_anchors(extent: int, tile: int, stride: int) -> list[int]:
    anchors, a = [], 0
    while a + tile < extent:
        anchors.append(a)
        a += stride
    anchors.append(extent - tile)
    return anchors


def tile_plan(level_width: int, level_height: int, tile_w: int, tile_h: int, overlap: int = 0,
              level: int = 0) -> list[TileRef]:
    """Row-major tiles covering the whole level.

    Anchors step by ``tile - overlap``; the last anchor on each axis is
    clamped to ``extent - tile`` so no tile leaves the level.
    """
    if tile_w < 1 or tile_h < 1:
        raise InvalidTiling("tile dimensions must be positive")
    if not 0 <= overlap < min(tile_w, tile_h):
        raise InvalidTiling(f"overlap {overlap} must be in [0, {min(tile_w, tile_h)})")
    if tile_w > level_width or tile_h > level_height:
        raise InvalidTiling(f"tile {tile_w}x{tile_h} exceeds level {level_width}x{level_height}")
    xs = _axis_anchors(level_width, tile_w, tile_w - overlap)
    ys = _axis_anchors(level_height, tile_h, tile_h - overlap)
    return [TileRef(level, x, y, tile_w, tile_h) for y in ys for x in xs]


def foreground_tiles(plan: list[TileRef], mask: ForegroundMask, min_fraction: float) -> list[TileRef]:
    if min_fraction <= 0:
        return list(plan)
    return [t for t in plan if mask.fraction(t) >= min_fraction]


def check_tile_in_bounds(tile: TileRef, width: int, height: int) -> None:
    if tile.x < 0 or tile.y < 0 or tile.x + tile.width > width or tile.y + tile.height > height:
        raise BoundsError(f"{tile} outside {width}x{height}")
