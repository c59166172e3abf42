import struct

import numpy as np
import pytest

from holoslide.errors import BoundsError, FormatError, InvalidInput, IoError
from holoslide.pyramid import Region, downsample2x, import_image, level_shapes, open_pyramid


def box_oracle(raster):
    """Per-pixel average of the existing 2x2 neighbours, rounded half up, in pure Python ints."""
    h, w, c = raster.shape
    out = np.zeros(((h + 1) // 2, (w + 1) // 2, c), dtype=np.uint8)
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            ys = [min(2 * y + d, h - 1) for d in (0, 1)]
            xs = [min(2 * x + d, w - 1) for d in (0, 1)]
            for ch in range(c):
                s = sum(int(raster[yy, xx, ch]) for yy in ys for xx in xs)
                out[y, x, ch] = (s + 2) // 4
    return out


def random_raster(gen, w, h):
    return gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_downsample_examples():
    r = np.zeros((2, 2, 3), dtype=np.uint8)
    r[1, 1] = 4
    assert downsample2x(r)[0, 0].tolist() == [1, 1, 1]
    r[1, 0] = 1  # {0,0,1,4} -> 1.25 -> 1
    assert downsample2x(r)[0, 0].tolist() == [1, 1, 1]
    r = np.array([[[0], [1]], [[0], [1]]], dtype=np.uint8).repeat(3, axis=2)  # mean 0.5 rounds up
    assert downsample2x(r)[0, 0, 0] == 1


@pytest.mark.parametrize("shape", [(5, 7), (1, 1), (1, 6), (9, 2), (8, 8)])
def test_downsample_matches_oracle(shape):
    r = random_raster(np.random.default_rng(sum(shape)), shape[1], shape[0])
    np.testing.assert_array_equal(downsample2x(r), box_oracle(r))


def test_level_shapes_examples():
    shapes = level_shapes(80000, 70000, 512)
    assert shapes[0] == (80000, 70000)
    assert max(shapes[-1]) <= 512 and max(shapes[-2]) > 512
    assert level_shapes(1001, 1001, 512)[:2] == [(1001, 1001), (501, 501)]
    assert level_shapes(1001, 1001, 128)[2] == (251, 251)
    assert level_shapes(512, 100, 512) == [(512, 100)]


def test_import_single_tile_single_level(tmp_path):
    r = random_raster(np.random.default_rng(0), 512, 512)
    with import_image(r, tmp_path / "a.hhpy", 512) as img:
        assert img.level_count == 1
        np.testing.assert_array_equal(img.read_level(0), r)


def test_round_trip_and_levels(tmp_path):
    gen = np.random.default_rng(1)
    r = random_raster(gen, 300, 171)
    with import_image(r, tmp_path / "a.hhpy", 64) as img:
        assert [img.level_dims(i) for i in range(img.level_count)] == level_shapes(300, 171, 64)
        np.testing.assert_array_equal(img.read_level(0), r)
        expect = r
        for lvl in range(1, img.level_count):
            expect = box_oracle(expect)
            np.testing.assert_array_equal(img.read_level(lvl), expect)


def test_region_across_tiles_equals_crop(tmp_path):
    r = random_raster(np.random.default_rng(2), 200, 150)
    with import_image(r, tmp_path / "a.hhpy", 64) as img:
        full = img.read_level(0)
        got = img.read_region(Region(0, 50, 40, 60, 50))  # spans 4 tiles
        np.testing.assert_array_equal(got, full[40:90, 50:110])


def test_file_layout(tmp_path):
    r = random_raster(np.random.default_rng(3), 100, 70)
    import_image(r, tmp_path / "a.hhpy", 64).close()
    data = (tmp_path / "a.hhpy").read_bytes()
    magic, version, tile, channels, levels = struct.unpack_from("<4sHIBB", data, 0)
    assert (magic, version, tile, channels, levels) == (b"HHPY", 1, 64, 3, 2)
    w, h = struct.unpack_from("<QQ", data, 12)
    assert (w, h) == (100, 70)
    offsets = struct.unpack_from("<4Q", data, 28)
    # tile (1, 0) is stored at its clipped size 36x64
    assert offsets[1] - offsets[0] == 64 * 64 * 3
    assert offsets[2] - offsets[1] == 36 * 64 * 3
    start = offsets[1]
    tile = np.frombuffer(data, np.uint8, 36 * 64 * 3, start).reshape(64, 36, 3)
    np.testing.assert_array_equal(tile, r[:64, 64:100])


def test_errors(tmp_path):
    r = random_raster(np.random.default_rng(4), 100, 100)
    with import_image(r, tmp_path / "a.hhpy", 64) as img:
        with pytest.raises(BoundsError):
            img.read_region(Region(0, 90, 0, 20, 5))
        with pytest.raises(BoundsError):
            img.read_region(Region(5, 0, 0, 1, 1))
        padded = img.read_region(Region(0, 90, 0, 20, 5), fill=7)
        np.testing.assert_array_equal(padded[:, :10], r[:5, 90:])
        assert (padded[:, 10:] == 7).all()
    with pytest.raises(InvalidInput):
        import_image(r, tmp_path / "b.hhpy", 100)
    with pytest.raises(IoError):
        open_pyramid(tmp_path / "missing.hhpy")
    bad = tmp_path / "bad.hhpy"
    bad.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(FormatError):
        open_pyramid(bad)
    trunc = tmp_path / "trunc.hhpy"
    trunc.write_bytes((tmp_path / "a.hhpy").read_bytes()[:-10])
    with pytest.raises(FormatError):
        open_pyramid(trunc).read_level(0)


def test_import_is_deterministic(tmp_path):
    r = random_raster(np.random.default_rng(5), 130, 90)
    import_image(r, tmp_path / "a.hhpy", 64).close()
    import_image(r, tmp_path / "b.hhpy", 64).close()
    assert (tmp_path / "a.hhpy").read_bytes() == (tmp_path / "b.hhpy").read_bytes()
