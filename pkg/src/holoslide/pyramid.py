"""Chunked multi-resolution RGB store (the ``.hhpy`` format).

Layout, little-endian throughout::

    magic      4s   b"HHPY"
    version    u16  1
    tile_size  u32
    channels   u8   3
    levels     u8
    per level:
        width   u64
        height  u64
        offsets u64 * (tiles_x * tiles_y), row-major, absolute file offsets
    payload: raw RGB8 tiles, row-major inside each tile, stored at their
             clipped size (edge tiles are not padded)

Level ``L`` is a 2x2 box-filtered (round-half-up) copy of level ``L-1``;
levels are produced until the longest side fits in one tile.
"""

from __future__ import annotations

import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, FormatError, InvalidInput, IoError

MAGIC = b"HHPY"
VERSION = 1
CHANNELS = 3

_HEADER = struct.Struct("<4sHIBB")
_LEVEL_DIMS = struct.Struct("<QQ")


@dataclass(frozen=True)
class Region:
    level: int
    x: int
    y: int
    width: int
    height: int


@dataclass
class LevelInfo:
    width: int
    height: int
    tiles_x: int
    tiles_y: int
    tile_offsets: list[int] = field(repr=False)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def downsample2x(raster: np.ndarray) -> np.ndarray:
    """Halve a ``(H, W, C)`` uint8 raster with a 2x2 box filter.

    Odd edges are handled by edge replication, which is the same as averaging
    the pixels that exist. Rounding is half-up: ``(sum + 2) // 4``.
    """
    h, w = raster.shape[:2]
    padded = np.pad(raster, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge").astype(np.uint16)
    acc = padded[0::2, 0::2] + padded[1::2, 0::2] + padded[0::2, 1::2] + padded[1::2, 1::2]
    return ((acc + 2) // 4).astype(np.uint8)


def level_shapes(width: int, height: int, tile_size: int) -> list[tuple[int, int]]:
    """Level dimensions an import of a ``width x height`` raster would produce."""
    shapes = [(width, height)]
    while max(shapes[-1]) > tile_size:
        w, h = shapes[-1]
        shapes.append((_ceil_div(w, 2), _ceil_div(h, 2)))
    return shapes


def build_levels(source: np.ndarray, tile_size: int) -> list[np.ndarray]:
    levels = [source]
    while max(levels[-1].shape[0], levels[-1].shape[1]) > tile_size:
        levels.append(downsample2x(levels[-1]))
    return levels


def _check_tile_size(tile_size: int) -> None:
    if not (64 <= tile_size <= 4096) or tile_size & (tile_size - 1):
        raise InvalidInput(f"tile_size must be a power of two in [64, 4096], got {tile_size}")


def _as_rgb8(source_pixels) -> np.ndarray:
    arr = np.asarray(source_pixels)
    if arr.ndim != 3 or arr.shape[2] != CHANNELS:
        raise InvalidInput(f"expected an (H, W, 3) raster, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput("empty raster")
    if arr.dtype != np.uint8:
        raise InvalidInput(f"expected uint8 pixels, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def import_image(source_pixels, path, tile_size: int = 512) -> "PyramidImage":
    """Write ``source_pixels`` as a pyramid file at ``path`` and open it.

    The write goes to a temporary file in the destination directory and is
    renamed into place, so readers never observe a half-written pyramid.
    """
    _check_tile_size(tile_size)
    source = _as_rgb8(source_pixels)
    path = Path(path)
    levels = build_levels(source, tile_size)
    if len(levels) > 255:
        raise InvalidInput("too many pyramid levels")

    header_size = _HEADER.size
    for lvl in levels:
        h, w = lvl.shape[:2]
        header_size += _LEVEL_DIMS.size + 8 * _ceil_div(w, tile_size) * _ceil_div(h, tile_size)

    parts = [_HEADER.pack(MAGIC, VERSION, tile_size, CHANNELS, len(levels))]
    offset = header_size
    for lvl in levels:
        h, w = lvl.shape[:2]
        tx, ty = _ceil_div(w, tile_size), _ceil_div(h, tile_size)
        offsets = []
        for j in range(ty):
            th = min(tile_size, h - j * tile_size)
            for i in range(tx):
                tw = min(tile_size, w - i * tile_size)
                offsets.append(offset)
                offset += th * tw * CHANNELS
        parts.append(_LEVEL_DIMS.pack(w, h))
        parts.append(np.asarray(offsets, dtype="<u8").tobytes())

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            for part in parts:
                fh.write(part)
            for lvl in levels:
                h, w = lvl.shape[:2]
                for y0 in range(0, h, tile_size):
                    for x0 in range(0, w, tile_size):
                        fh.write(np.ascontiguousarray(lvl[y0:y0 + tile_size, x0:x0 + tile_size]).tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write {path}: {exc}") from exc
    return PyramidImage.open(path)


class PyramidImage:
    """Read-only handle on a ``.hhpy`` file.

    Reads go through a shared read-only memory map, so one handle can serve
    any number of threads.
    """

    def __init__(self, path, tile_size: int, levels: list[LevelInfo], data, data_start: int):
        self.path = Path(path)
        self.tile_size = tile_size
        self.levels = levels
        self._data = data
        self._data_start = data_start

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @classmethod
    def open(cls, path) -> "PyramidImage":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot open {path}: {exc}") from exc

        if len(data) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, tile_size, channels, level_count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if channels != CHANNELS or level_count < 1 or tile_size < 1:
            raise FormatError(f"{path}: bad channel or level count")

        pos = _HEADER.size
        levels = []
        for _ in range(level_count):
            if pos + _LEVEL_DIMS.size > len(data):
                raise FormatError(f"{path}: truncated level table")
            w, h = _LEVEL_DIMS.unpack_from(data, pos)
            pos += _LEVEL_DIMS.size
            tx, ty = _ceil_div(w, tile_size), _ceil_div(h, tile_size)
            n = tx * ty
            if w < 1 or h < 1 or pos + 8 * n > len(data):
                raise FormatError(f"{path}: bad level table")
            offsets = np.frombuffer(data, dtype="<u8", count=n, offset=pos).astype(np.int64)
            pos += 8 * n
            levels.append(LevelInfo(int(w), int(h), tx, ty, offsets.tolist()))

        all_offsets = np.concatenate([np.asarray(lv.tile_offsets, dtype=np.int64) for lv in levels])
        if len(all_offsets) > 1 and np.any(np.diff(all_offsets) <= 0):
            raise FormatError(f"{path}: tile offsets are not strictly increasing")
        last = levels[-1]
        tail = (min(tile_size, last.width - (last.tiles_x - 1) * tile_size)
                * min(tile_size, last.height - (last.tiles_y - 1) * tile_size) * CHANNELS)
        if all_offsets[0] < pos or all_offsets[-1] + tail > len(data):
            raise FormatError(f"{path}: tile data outside the file (truncated?)")
        return cls(path, tile_size, levels, data, pos)

    def level_dims(self, level: int) -> tuple[int, int]:
        if not 0 <= level < self.level_count:
            raise BoundsError(f"level {level} outside [0, {self.level_count})")
        info = self.levels[level]
        return info.width, info.height

    def _tile(self, level: int, i: int, j: int) -> np.ndarray:
        info = self.levels[level]
        ts = self.tile_size
        tw = min(ts, info.width - i * ts)
        th = min(ts, info.height - j * ts)
        off = info.tile_offsets[j * info.tiles_x + i]
        nbytes = tw * th * CHANNELS
        if off < self._data_start or off + nbytes > len(self._data):
            raise FormatError(f"{self.path}: tile ({level}, {i}, {j}) has bad offset {off}")
        return np.frombuffer(self._data, dtype=np.uint8, count=nbytes, offset=off).reshape(th, tw, CHANNELS)

    def read_region(self, region: Region, fill: int | None = None) -> np.ndarray:
        """Return the ``(height, width, 3)`` pixels of ``region``.

        With ``fill=None`` the region must lie inside the level. Passing a fill
        value allows regions that overhang the level; missing pixels take it.
        """
        w, h = self.level_dims(region.level)
        if region.width < 1 or region.height < 1:
            raise BoundsError(f"degenerate region {region}")
        x0, y0 = region.x, region.y
        x1, y1 = x0 + region.width, y0 + region.height
        inside = x0 >= 0 and y0 >= 0 and x1 <= w and y1 <= h
        if not inside and fill is None:
            raise BoundsError(f"region {region} outside level {region.level} bounds {w}x{h}")

        out = np.empty((region.height, region.width, CHANNELS), dtype=np.uint8)
        if not inside:
            out.fill(fill)
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
        if cx0 >= cx1 or cy0 >= cy1:
            return out
        ts = self.tile_size
        for j in range(cy0 // ts, _ceil_div(cy1, ts)):
            for i in range(cx0 // ts, _ceil_div(cx1, ts)):
                tile = self._tile(region.level, i, j)
                tx0, ty0 = i * ts, j * ts
                sx0, sy0 = max(cx0, tx0), max(cy0, ty0)
                sx1, sy1 = min(cx1, tx0 + tile.shape[1]), min(cy1, ty0 + tile.shape[0])
                out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
        return out

    def read_level(self, level: int) -> np.ndarray:
        w, h = self.level_dims(level)
        return self.read_region(Region(level, 0, 0, w, h))

    def close(self) -> None:
        self._data.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self) -> str:
        dims = [(lv.width, lv.height) for lv in self.levels]
        return f"PyramidImage({str(self.path)!r}, tile_size={self.tile_size}, levels={dims})"


def open_pyramid(path) -> PyramidImage:
    return PyramidImage.open(path)


def read_region(img: PyramidImage, r: Region) -> np.ndarray:
    return img.read_region(r)


def level_dims(img: PyramidImage, level: int) -> tuple[int, int]:
    return img.level_dims(level)
