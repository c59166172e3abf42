"""Raster ingestion: binary PPM (P6) and non-interlaced PNG."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput, IoError


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: only binary PPM (P6) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM (maxval 255) is supported")
    n = width * height * 3
    if len(data) - pos < n:
        raise FormatError(f"{path}: truncated PPM raster")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidInput(f"expected an (H, W, 3) raster, got {pixels.shape}")
    h, w = pixels.shape[:2]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG file")
        if im.info.get("interlace"):
            raise FormatError(f"{path}: interlaced PNG is not supported")
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_image(path) -> np.ndarray:
    """Load an RGB8 raster from a ``.ppm`` or ``.png`` file."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"P6"):
        return read_ppm(path)
    if head.startswith(b"\x89PNG"):
        return read_png(path)
    raise FormatError(f"{path}: unsupported image format (expected PPM P6 or PNG)")
