"""BraTS-style region Dice and the Welch two-tailed t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .volume import ED, ET, NCR, SegMask, check_same_shape


@dataclass(frozen=True)
class RegionSpec:
    name: str
    label_set: frozenset


ET_REGION = RegionSpec("ET", frozenset({ET}))
TC_REGION = RegionSpec("TC", frozenset({NCR, ET}))
WT_REGION = RegionSpec("WT", frozenset({NCR, ED, ET}))
REGIONS = (ET_REGION, TC_REGION, WT_REGION)


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, SegMask) else np.asarray(m)


def region_mask(mask, region: RegionSpec) -> np.ndarray:
    return np.isin(_labels(mask), list(region.label_set))


def dice(pred, gt, region: RegionSpec) -> float:
    """2|P ∩ G| / (|P| + |G|) on the binarised region; 1.0 when both are empty."""
    p, g = _labels(pred), _labels(gt)
    check_same_shape(p.shape, g.shape)
    pb, gb = region_mask(p, region), region_mask(g, region)
    denom = int(pb.sum()) + int(gb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pb, gb).sum()) / denom


def mean_dice(pred, gt) -> tuple:
    """({"ET": .., "TC": .., "WT": ..}, mean of the three)."""
    scores = {r.name: dice(pred, gt, r) for r in REGIONS}
    return scores, float(np.mean(list(scores.values())))


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    df: float
    degenerate: bool = False


def two_tailed_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance t-test with a two-sided p-value.

    Zero variance in both samples is flagged degenerate: p = 1 for equal
    means, p = 0 otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, 1.0, math.nan, degenerate=True)
        return TTestResult(math.copysign(math.inf, diff), 0.0, math.nan, degenerate=True)
    t = diff / math.sqrt(se2)
    # Welch-Satterthwaite df from variance shares; squaring tiny variances directly underflows
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra ** 2 / (a.size - 1) + rb ** 2 / (b.size - 1))
    # two-sided tail of Student's t: P(|T| > |t|) = 2 * stdtr(df, -|t|)
    p = float(min(1.0, 2.0 * special.stdtr(df, -abs(t))))
    return TTestResult(float(t), p, float(df))
