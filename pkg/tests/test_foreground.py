import itertools
from fractions import Fraction

import numpy as np
import pytest

from holoslide.errors import ConfigError, DegenerateHistogram, InvalidTiling, NoForeground
from holoslide.foreground import (ForegroundMask, RoiSampler, SamplerConfig, TileRef, compute_foreground,
                                  foreground_tiles, luminance, otsu_threshold, tile_plan)
from holoslide.pyramid import import_image


def otsu_oracle(hist):
    """Exhaustive scan of w0 w1 (mu0 - mu1)^2 over all thresholds, exact, first maximum wins."""
    hist = [int(h) for h in hist]
    total = sum(hist)
    best, best_t = None, 0
    for t in range(1, 256):
        n0 = sum(hist[:t])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(v * hist[v] for v in range(t)), n0)
        mu1 = Fraction(sum(v * hist[v] for v in range(t, 256)), n1)
        score = Fraction(n0 * n1, total * total) * (mu0 - mu1) ** 2
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def mask_from(bits, level=0):
    h, w = bits.shape
    return ForegroundMask(level, w, h, bits)


def test_luminance_rounding():
    px = np.array([[[255, 255, 255], [0, 0, 0], [1, 0, 0], [0, 1, 1]]], dtype=np.uint8)
    assert luminance(px).tolist() == [[255, 0, 0, 1]]  # 0.299 -> 0, 0.701 -> 1


@pytest.mark.parametrize("seed", range(100))
def test_otsu_matches_exhaustive_scan(seed):
    gen = np.random.default_rng(seed)
    hist = np.zeros(256, dtype=np.int64)
    support = gen.choice(256, size=gen.integers(2, 40), replace=False)
    hist[support] = gen.integers(1, 500, size=len(support))
    t, degenerate = otsu_threshold(hist)
    assert not degenerate
    assert t == otsu_oracle(hist)


def test_otsu_half_black_half_white():
    hist = np.zeros(256, dtype=np.int64)
    hist[0] = hist[255] = 50
    t, _ = otsu_threshold(hist)
    assert 0 < t <= 255
    gray = np.array([0, 255])
    assert (gray < t).tolist() == [True, False]


def test_uniform_slide_is_degenerate(tmp_path):
    img = import_image(np.full((100, 100, 3), 240, np.uint8), tmp_path / "w.hhpy", 64)
    with pytest.raises(DegenerateHistogram) as exc:
        compute_foreground(img, 0)
    assert exc.value.mask.bits.sum() == 0
    assert otsu_threshold(np.bincount([7] * 10, minlength=256)) == (0, True)


def test_disk_fraction(tmp_path):
    yy, xx = np.mgrid[:512, :512]
    disks = [(100, 120, 50), (300, 350, 80), (420, 100, 40)]
    gt = np.zeros((512, 512), bool)
    for cx, cy, r in disks:
        gt |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    px = np.where(gt[..., None], 140, 245).astype(np.uint8).repeat(3, axis=2)
    px = np.clip(px + np.random.default_rng(0).integers(-5, 6, px.shape), 0, 255).astype(np.uint8)
    fg = compute_foreground(import_image(px, tmp_path / "d.hhpy", 128), 0)
    assert abs(fg.foreground_fraction() - gt.mean()) <= 0.01
    assert fg.threshold_used > 145


def test_mask_file_round_trip(tmp_path):
    bits = np.random.default_rng(0).random((20, 30)) < 0.5
    m = mask_from(bits, level=2)
    m.save(tmp_path / "f.fg")
    back = ForegroundMask.load(tmp_path / "f.fg")
    assert (back.level, back.width, back.height) == (2, 30, 20)
    np.testing.assert_array_equal(back.bits, bits)
    assert (tmp_path / "f.fg").read_bytes()[:4] == b"HHFG"


def test_sampler_all_background():
    s = RoiSampler(mask_from(np.zeros((50, 50), bool)), SamplerConfig(10, 10, 0.5, 0))
    with pytest.raises(NoForeground):
        s.draw(0)


def test_sampler_full_foreground_is_reproducible():
    m = mask_from(np.ones((80, 60), bool))
    a = RoiSampler(m, SamplerConfig(16, 16, 0.5, 7)).draw(3)
    assert a == RoiSampler(m, SamplerConfig(16, 16, 0.5, 7)).draw(3)
    assert 0 <= a.x <= 44 and 0 <= a.y <= 64


def test_sampler_unique_anchor():
    bits = np.zeros((256, 256), bool)
    bits[64:96, 64:96] = True
    s = RoiSampler(mask_from(bits), SamplerConfig(32, 32, 1.0, 0))
    assert s.valid_anchors().tolist() == [64 * (256 - 32 + 1) + 64]
    for k in range(3):
        t = s.draw(k)
        assert (t.x, t.y) == (64, 64)


def test_sampler_rejects_large_roi():
    with pytest.raises(ConfigError):
        RoiSampler(mask_from(np.ones((10, 10), bool)), SamplerConfig(11, 5, 0.5, 0))


def test_tile_plan_example():
    plan = tile_plan(10000, 8000, 4000, 4000, 0)
    assert sorted({t.x for t in plan}) == [0, 4000, 6000]
    assert sorted({t.y for t in plan}) == [0, 4000]
    assert len(plan) == 6
    assert [(t.x, t.y) for t in plan[:3]] == [(0, 0), (4000, 0), (6000, 0)]


@pytest.mark.parametrize("w,h,tw,th,ov", [(100, 70, 30, 20, 0), (100, 70, 30, 20, 7), (64, 64, 64, 64, 0),
                                          (513, 257, 128, 64, 63)])
def test_tile_plan_covers_level(w, h, tw, th, ov):
    cover = np.zeros((h, w), int)
    for t in tile_plan(w, h, tw, th, ov):
        assert 0 <= t.x <= w - tw and 0 <= t.y <= h - th
        cover[t.y:t.y + th, t.x:t.x + tw] += 1
    assert cover.min() >= 1


def test_tile_plan_errors():
    with pytest.raises(InvalidTiling):
        tile_plan(100, 100, 50, 50, 50)
    with pytest.raises(InvalidTiling):
        tile_plan(100, 100, 0, 50)
    with pytest.raises(InvalidTiling):
        tile_plan(100, 100, 101, 50)


def test_foreground_tiles():
    bits = np.zeros((100, 100), bool)
    bits[:, :50] = True
    plan = tile_plan(100, 100, 50, 50)
    m = mask_from(bits)
    assert foreground_tiles(plan, m, 0) == plan
    assert foreground_tiles(plan, m, 0.9) == [plan[0], plan[2]]
    assert foreground_tiles(plan, mask_from(np.zeros((100, 100), bool)), 0.1) == []


def test_fraction_across_levels():
    bits = np.zeros((50, 50), bool)
    bits[:25] = True
    m = mask_from(bits, level=1)  # level-0 tile (0,0,100,50) maps to rows 0..25 of level 1
    assert m.fraction(TileRef(0, 0, 0, 100, 50)) == 1.0
    assert m.fraction(TileRef(0, 0, 0, 100, 100)) == 0.5
