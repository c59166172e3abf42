"""Run-length encoded binary masks and their on-disk form.

A mask is stored as row-major run lengths that alternate background,
foreground, background, ... and always start with background (a leading
zero-length run when the first pixel is set). Files are little-endian::

    magic   4s   b"HHFG" (foreground masks) or b"HHSM" (segmentation masks)
    level   u32
    width   u64
    height  u64
    runs    u32 * n, to end of file

Runs longer than ``2**32 - 1`` are split with a zero-length run of the other
class in between, so any width x height fits.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError, ShapeError

FOREGROUND_MAGIC = b"HHFG"
SEGMENTATION_MAGIC = b"HHSM"
_HEADER = struct.Struct("<4sIQQ")
_U32_MAX = (1 << 32) - 1


def runs_from_bits(bits) -> np.ndarray:
    """Run lengths (int64) of a flattened boolean array, background first."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(1, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).astype(np.int64)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs


def bits_from_runs(runs, size: int | None = None) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    values = (np.arange(len(runs)) % 2).astype(bool)
    flat = np.repeat(values, runs)
    if size is not None and flat.size != size:
        raise FormatError(f"runs cover {flat.size} pixels, expected {size}")
    return flat


class RunEncoder:
    """Incrementally run-length encode a mask delivered in row-major pieces."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._value = False
        self._length = 0

    def push(self, bits) -> None:
        flat = np.asarray(bits, dtype=bool).ravel()
        if flat.size == 0:
            return
        runs = runs_from_bits(flat)
        if runs[0] == 0:
            runs = runs[1:]
            first = True
        else:
            first = False
        # runs now starts with a run of value `first`
        if first == self._value:
            self._length += int(runs[0])
            runs = runs[1:]
            value = not first
        else:
            value = first
        if len(runs) == 0:
            return
        self._chunks.append(np.array([self._length], dtype=np.int64))
        self._chunks.append(runs[:-1])
        self._length = int(runs[-1])
        # value of the last run in `runs`
        self._value = value if len(runs) % 2 == 1 else (not value)

    def finish(self) -> np.ndarray:
        out = np.concatenate(self._chunks + [np.array([self._length], dtype=np.int64)])
        return out


def _split_long_runs(runs: np.ndarray) -> np.ndarray:
    if len(runs) == 0 or runs.max() <= _U32_MAX:
        return runs
    out = []
    for r in runs.tolist():
        while r > _U32_MAX:
            out.extend([_U32_MAX, 0])
            r -= _U32_MAX
        out.append(r)
    return np.asarray(out, dtype=np.int64)


def _merge_zero_runs(runs: np.ndarray) -> np.ndarray:
    """Undo ``_split_long_runs``: fold interior zero-length runs into neighbours."""
    if len(runs) < 3 or not np.any(runs[1:-1] == 0):
        return runs
    out = [int(runs[0])]
    i = 1
    while i < len(runs):
        if runs[i] == 0 and i + 1 < len(runs):
            out[-1] += int(runs[i + 1])
            i += 2
        else:
            out.append(int(runs[i]))
            i += 1
    return np.asarray(out, dtype=np.int64)


@dataclass
class WsiMask:
    """Binary mask over a full pyramid level, held as run lengths."""

    level: int
    width: int
    height: int
    runs: np.ndarray

    def __post_init__(self):
        self.runs = np.asarray(self.runs, dtype=np.int64)
        total = int(self.runs.sum())
        if total != self.width * self.height:
            raise FormatError(f"runs cover {total} pixels, mask is {self.width}x{self.height}")

    @classmethod
    def from_dense(cls, bits: np.ndarray, level: int = 0) -> "WsiMask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"expected a 2-D mask, got {bits.shape}")
        h, w = bits.shape
        return cls(level, w, h, runs_from_bits(bits))

    def to_dense(self) -> np.ndarray:
        return bits_from_runs(self.runs, self.width * self.height).reshape(self.height, self.width)

    @property
    def bits(self) -> np.ndarray:
        return self.to_dense()

    def popcount(self) -> int:
        return int(self.runs[1::2].sum())

    def crop(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        """Dense crop; decodes only the rows the crop touches."""
        start = y * self.width
        stop = (y + height) * self.width
        ends = np.cumsum(self.runs)
        starts = ends - self.runs
        first = int(np.searchsorted(ends, start, side="right"))
        last = int(np.searchsorted(starts, stop, side="left"))
        seg_runs = self.runs[first:last].copy()
        if len(seg_runs) == 0:
            return np.zeros((height, width), dtype=bool)
        seg_runs[0] = ends[first] - start
        seg_runs[-1] -= max(0, int(ends[last - 1]) - stop)
        if len(seg_runs) == 1:
            seg_runs[0] = stop - start
        values = (np.arange(first, last) % 2).astype(bool)
        rows = np.repeat(values, seg_runs).reshape(height, self.width)
        return rows[:, x:x + width].copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, WsiMask):
            return NotImplemented
        return (
            self.level == other.level
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(_merge_zero_runs(self.runs), _merge_zero_runs(other.runs))
        )


def write_mask_file(path, runs, level: int, width: int, height: int, magic: bytes) -> None:
    path = Path(path)
    runs = _split_long_runs(np.asarray(runs, dtype=np.int64))
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(magic, level, width, height))
            fh.write(runs.astype("<u4").tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_mask_file(path, magic: bytes | None = None):
    """Return ``(magic, level, width, height, runs)`` from a mask file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated mask header")
    found, level, width, height = _HEADER.unpack_from(data, 0)
    if found not in (FOREGROUND_MAGIC, SEGMENTATION_MAGIC) or (magic is not None and found != magic):
        raise FormatError(f"{path}: bad mask magic {found!r}")
    if (len(data) - _HEADER.size) % 4:
        raise FormatError(f"{path}: truncated run table")
    runs = np.frombuffer(data, dtype="<u4", offset=_HEADER.size).astype(np.int64)
    if int(runs.sum()) != width * height:
        raise FormatError(f"{path}: runs do not cover {width}x{height}")
    return found, level, width, height, _merge_zero_runs(runs)


def save_wsi_mask(mask: WsiMask, path) -> None:
    write_mask_file(path, mask.runs, mask.level, mask.width, mask.height, SEGMENTATION_MAGIC)


def load_wsi_mask(path) -> WsiMask:
    _, level, width, height, runs = read_mask_file(path)
    return WsiMask(level, width, height, runs)
