"""Dice scores (dense and run-length streamed) and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, DegenerateSample, InvalidInput, ShapeError
from .masks import WsiMask

EXACT_MAX_N = 25


def dice_from_counts(intersection: int, pred_count: int, gt_count: int) -> float:
    denom = pred_count + gt_count
    if denom == 0:
        return 1.0
    return 2.0 * intersection / denom


def dice_counts(pred, gt) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``, with two empty masks scoring 1.0."""
    return dice_from_counts(*dice_counts(pred, gt))


def _foreground_intervals(runs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ends = np.cumsum(runs)
    starts = ends - runs
    return starts[1::2], ends[1::2]


def rle_dice_counts(pred_runs, gt_runs) -> tuple[int, int, int]:
    """Intersection and cardinalities straight from two run-length lists.

    Works on run boundaries only, so cost scales with the number of runs and
    not with the pixel count.
    """
    pred_runs = np.asarray(pred_runs, dtype=np.int64)
    gt_runs = np.asarray(gt_runs, dtype=np.int64)
    ps, pe = _foreground_intervals(pred_runs)
    gs, ge = _foreground_intervals(gt_runs)
    pred_count = int((pe - ps).sum())
    gt_count = int((ge - gs).sum())
    if len(ps) == 0 or len(gs) == 0:
        return 0, pred_count, gt_count
    # sweep over the merged boundaries; both interval lists are sorted and disjoint
    cuts = np.unique(np.concatenate([ps, pe, gs, ge]))
    seg_start, seg_len = cuts[:-1], np.diff(cuts)
    in_pred = np.searchsorted(pe, seg_start, side="right")
    in_pred = (in_pred < len(ps)) & (ps[np.minimum(in_pred, len(ps) - 1)] <= seg_start)
    in_gt = np.searchsorted(ge, seg_start, side="right")
    in_gt = (in_gt < len(gs)) & (gs[np.minimum(in_gt, len(gs) - 1)] <= seg_start)
    intersection = int(seg_len[in_pred & in_gt].sum())
    return intersection, pred_count, gt_count


def wsi_dice(pred: WsiMask, gt: WsiMask) -> float:
    if (pred.level, pred.width, pred.height) != (gt.level, gt.width, gt.height):
        raise BoundsError(
            f"mask mismatch: level {pred.level} {pred.width}x{pred.height} "
            f"vs level {gt.level} {gt.width}x{gt.height}"
        )
    return dice_from_counts(*rle_dice_counts(pred.runs, gt.runs))


@dataclass
class DiceReport:
    mode: str
    per_item: list[tuple[str, float]]
    mean: float = field(init=False)

    def __post_init__(self):
        if not self.per_item:
            raise InvalidInput("a Dice report needs at least one item")
        if self.mode not in ("patch", "wsi"):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        self.mean = float(np.mean([d for _, d in self.per_item]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "items": [{"id": i, "dice": d} for i, d in self.per_item],
            "mean": self.mean,
        }


@dataclass
class WilcoxonResult:
    n_effective: int
    W_statistic: float
    p_value: float
    method: str
    degenerate: bool = False


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) over all 2^n equally likely sign assignments.

    Doubled ranks are integers even with ties, so the count of assignments
    per rank sum is a subset-sum table; this equals brute-force enumeration.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    table = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    table[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(table)
        shifted[r:] = table[:-r] if r else table
        table = table + shifted
    limit = int(np.floor(2 * w + 1e-9))
    return float(table[:limit + 1].sum() / 2.0 ** len(ranks))


def wilcoxon_signed_rank(pairs, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes share their average
    rank. ``W = min(W+, W-)``. With ``method="auto"`` the p-value is exact for
    up to 25 non-zero differences and a tie-corrected normal approximation
    with continuity correction beyond that.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise InvalidInput("expected a non-empty sequence of (a, b) pairs")
    diff = arr[:, 0] - arr[:, 1]
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        result = WilcoxonResult(0, 0.0, 1.0, "exact", degenerate=True)
        raise DegenerateSample("all paired differences are zero", result=result)

    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    w = min(w_plus, w_minus)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal-approx"
    if method == "exact":
        p = min(1.0, 2.0 * _exact_lower_tail(ranks, w))
    elif method in ("normal-approx", "approx"):
        method = "normal-approx"
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(diff), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
        if var <= 0:
            p = 1.0
        else:
            z = min(0.0, w - mean + 0.5) / math.sqrt(var)
            p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    else:
        raise InvalidInput(f"unknown method {method!r}")
    return WilcoxonResult(n, w, p, method)
