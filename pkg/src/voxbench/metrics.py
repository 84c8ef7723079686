"""Scoring and statistics: Dice, performance gaps, paired Wilcoxon test.

Conventions worth knowing: Dice of two empty masks is 1.0 (a correctly absent
structure is rewarded) and such cases are counted separately in reports; zero
differences are dropped before Wilcoxon ranking; the exact Wilcoxon path
enumerates the full sign-flip distribution, the n > 20 path uses the normal
approximation with tie correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

WILCOXON_EXACT_MAX_N = 20


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|P and G| / (|P| + |G|); both empty gives 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


@dataclass(frozen=True)
class DiceReport:
    """Per-structure Dice for one volume."""

    volume_id: str
    per_structure: dict
    undefined: tuple[str, ...] = ()  # structures empty in both pred and gt

    def __post_init__(self):
        for name, value in self.per_structure.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"DSC for {name!r} out of [0, 1]: {value}")

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_structure.values())))


def dice_report(pred: np.ndarray, gt: np.ndarray, class_names,
                volume_id: str = "") -> DiceReport:
    """Per-foreground-structure Dice between predicted and true label maps."""
    per = {}
    undefined = []
    for value, name in enumerate(class_names):
        if value == 0:
            continue
        p = pred == value
        g = gt == value
        if not p.any() and not g.any():
            undefined.append(name)
        per[name] = dice(p, g)
    return DiceReport(volume_id=volume_id, per_structure=per,
                      undefined=tuple(undefined))


def performance_gap(acc_m: float, acc_ref: float) -> float:
    """Relative accuracy difference from the reference, in percent."""
    if acc_ref <= 0:
        raise ValueError(f"reference accuracy must be positive, got {acc_ref}")
    return (acc_m - acc_ref) / acc_ref * 100.0


def modality_gap(dsc_a: dict, dsc_b: dict) -> dict:
    """Per-structure mean DSC difference, modality B minus modality A."""
    if set(dsc_a) != set(dsc_b):
        missing = sorted(set(dsc_a) ^ set(dsc_b))
        raise ValueError(f"structure keys differ between modalities: {missing}")
    return {k: float(np.mean(dsc_b[k]) - np.mean(dsc_a[k])) for k in sorted(dsc_a)}


def group_structures(per_structure: dict, grouping: dict) -> dict:
    """Mean DSC per named group; every structure must be covered."""
    covered = {s for members in grouping.values() for s in members}
    uncovered = sorted(set(per_structure) - covered)
    if uncovered:
        raise ValueError(f"structures not covered by grouping: {uncovered}")
    return {
        group: float(np.mean([per_structure[s] for s in members]))
        for group, members in grouping.items()
        if any(s in per_structure for s in members)
    }


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float  # W+, sum of ranks of positive differences
    n: int            # pairs remaining after dropping zero differences
    exact: bool
    degenerate: bool = False


def _exact_sign_flip_distribution(doubled_ranks: list[int]) -> list[int]:
    """Counts of each achievable doubled rank-sum over all 2^n sign choices."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        nxt = counts[:]
        for s in range(total - r + 1):
            if counts[s]:
                nxt[s + r] += counts[s]
        counts = nxt
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. For n <= 20 the p-value is exact over all
    2^n sign assignments of the ranked absolute differences (ties get average
    ranks); for larger n the normal approximation with tie correction is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length paired 1D samples, got {a.shape} and {b.shape}")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        return WilcoxonResult(p_value=1.0, statistic=0.0, n=0, exact=True,
                              degenerate=True)
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")

    ranks = stats.rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if n <= WILCOXON_EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_sign_flip_distribution(doubled)
        w2 = int(round(2 * w_plus))
        le = sum(counts[: w2 + 1])
        ge = sum(counts[w2:])
        p = min(1.0, 2 * min(le, ge) / (1 << n))
        return WilcoxonResult(p_value=p, statistic=w_plus, n=n, exact=True)

    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mu) / math.sqrt(var)
    p = 2.0 * float(stats.norm.sf(abs(z)))
    return WilcoxonResult(p_value=min(1.0, p), statistic=w_plus, n=n, exact=False)


def significance_marker(p: float) -> str:
    """Stars for figure annotations: * p<0.05, ** p<0.01, *** p<0.001."""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class GapReport:
    """Performance gap of one model against the per-task best, in percent."""

    gap_percent: float
    reference_id: str
    shots: int | str = "full"
    model_id: str = ""
