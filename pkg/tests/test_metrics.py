import itertools
import math

import numpy as np
import pytest

from holoslide.errors import BoundsError, DegenerateSample
from holoslide.masks import WsiMask
from holoslide.metrics import DiceReport, dice, rle_dice_counts, wilcoxon_signed_rank, wsi_dice


def dense_dice(a, b):
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * (a & b).sum() / s


def enumeration_p(diffs):
    """Two-sided p from all 2^n sign flips of the average-ranked |d|."""
    d = [x for x in diffs if x != 0]
    mags = sorted(abs(x) for x in d)
    def rank(v):
        idx = [i + 1 for i, m in enumerate(mags) if m == v]
        return sum(idx) / len(idx)
    ranks = [rank(abs(x)) for x in d]
    w_plus = sum(r for r, x in zip(ranks, d) if x > 0)
    w = min(w_plus, sum(ranks) - w_plus)
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(d))
               if sum(r for r, s in zip(ranks, signs) if s) <= w + 1e-9)
    return min(1.0, 2 * hits / 2 ** len(d))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    assert dice(a, a) == 1.0
    b = a.copy(); b[0, 0] = True
    c = a.copy(); c[1, 1] = True
    assert dice(b, b) == 1.0
    assert dice(b, c) == 0.0
    b[0, 1] = True
    assert dice(b, c | b) == pytest.approx(2 * 2 / (2 + 3))


@pytest.mark.parametrize("seed", range(100))
def test_rle_dice_equals_dense(seed):
    gen = np.random.default_rng(seed)
    h, w = gen.integers(1, 1025, size=2)
    pa, pb = gen.random(2) ** 2
    a = gen.random((h, w)) < pa
    b = (gen.random((h, w)) < pb) | (a & (gen.random((h, w)) < 0.5))
    assert wsi_dice(WsiMask.from_dense(a), WsiMask.from_dense(b)) == dense_dice(a, b)


def test_wsi_dice_shape_mismatch():
    with pytest.raises(BoundsError):
        wsi_dice(WsiMask.from_dense(np.zeros((2, 3), bool)), WsiMask.from_dense(np.zeros((3, 2), bool)))


def test_report():
    r = DiceReport("wsi", [("a", 1.0), ("b", 0.5)])
    assert r.to_dict() == {"mode": "wsi", "items": [{"id": "a", "dice": 1.0}, {"id": "b", "dice": 0.5}],
                           "mean": 0.75}


def test_wilcoxon_examples():
    r = wilcoxon_signed_rank([(1 + i, 0) for i in range(5)])
    assert r.W_statistic == 0 and r.p_value == pytest.approx(0.0625) and r.method == "exact"
    r = wilcoxon_signed_rank([(1, 0), (0, 1)])
    assert r.p_value == 1.0
    with pytest.raises(DegenerateSample) as exc:
        wilcoxon_signed_rank([(0.5, 0.5)] * 4)
    assert exc.value.result.p_value == 1.0


@pytest.mark.parametrize("seed", range(50))
def test_wilcoxon_exact_equals_enumeration(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(1, 13))
    a = np.round(gen.normal(0.8, 0.05, n), 2)
    b = np.round(a + gen.normal(0.01, 0.03, n), 2)  # rounding produces ties and zeros
    if np.all(a == b):
        b[0] += 0.01
    r = wilcoxon_signed_rank(list(zip(a, b)), method="exact")
    assert r.p_value == pytest.approx(enumeration_p(a - b), abs=1e-12)


def test_wilcoxon_normal_agrees_with_exact():
    gen = np.random.default_rng(0)
    a = gen.normal(0.85, 0.05, 30)
    b = a - 0.01 + gen.normal(0, 0.03, 30)
    pairs = list(zip(a[:20], b[:20]))
    exact = wilcoxon_signed_rank(pairs, method="exact").p_value
    approx = wilcoxon_signed_rank(pairs, method="normal-approx").p_value
    assert abs(exact - approx) <= 0.02
    assert wilcoxon_signed_rank(list(zip(a, b))).method == "normal-approx"
