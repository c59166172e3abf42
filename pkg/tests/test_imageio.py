import numpy as np
import pytest
from PIL import Image

from holoslide.errors import FormatError, IoError
from holoslide.imageio import read_image, write_ppm


def test_ppm_round_trip(tmp_path):
    r = np.random.default_rng(0).integers(0, 256, (7, 11, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", r)
    np.testing.assert_array_equal(read_image(tmp_path / "a.ppm"), r)


def test_ppm_with_comment(tmp_path):
    body = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + body)
    np.testing.assert_array_equal(read_image(tmp_path / "c.ppm").ravel(), np.arange(12))


def test_png(tmp_path):
    r = np.random.default_rng(1).integers(0, 256, (5, 6, 3), dtype=np.uint8)
    Image.fromarray(r).save(tmp_path / "a.png")
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), r)


def test_rejections(tmp_path):
    with pytest.raises(IoError):
        read_image(tmp_path / "none.ppm")
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_image(tmp_path / "p3.ppm")
    (tmp_path / "deep.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(FormatError):
        read_image(tmp_path / "deep.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(6))
    with pytest.raises(FormatError):
        read_image(tmp_path / "short.ppm")
