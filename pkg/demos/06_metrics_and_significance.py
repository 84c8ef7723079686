"""Scoring and statistics: Dice, gaps, grouped means, paired Wilcoxon."""

import numpy as np

from voxbench.metrics import (
    dice,
    group_structures,
    modality_gap,
    performance_gap,
    significance_marker,
    wilcoxon_signed_rank,
)

# Dice on hand-made masks.
pred = np.zeros((4, 4, 4), dtype=bool)
gt = np.zeros((4, 4, 4), dtype=bool)
pred[:2, 0, 0] = True
gt[:4, 0, 0] = True
print(f"dice(|P|=2, |G|=4, overlap 2) = {dice(pred, gt):.4f}")
print(f"dice of two empty masks = {dice(np.zeros(8, bool), np.zeros(8, bool))}")

# Performance gap relative to the best model of a task.
print(f"gap(0.72 vs ref 0.80) = {performance_gap(0.72, 0.80):+.2f}%")
print(f"gap(0.82 vs ref 0.87) = {performance_gap(0.82, 0.87):+.2f}%")

# Per-structure modality differences (B minus A).
a = {"large_organ": [0.91, 0.89], "small_organ": [0.55, 0.61]}
b = {"large_organ": [0.90, 0.92], "small_organ": [0.70, 0.66]}
print("modality gaps:", {k: round(v, 3) for k, v in modality_gap(a, b).items()})

# Grouped means over structure families.
per_structure = {"large_organ": 0.9, "medium_organ_1": 0.75,
                 "medium_organ_2": 0.8, "small_organ": 0.5}
groups = {"large": ("large_organ",),
          "medium": ("medium_organ_1", "medium_organ_2"),
          "small": ("small_organ",)}
print("grouped:", {k: round(v, 3) for k, v in group_structures(per_structure, groups).items()})

# Paired Wilcoxon: exact for small n, including the all-positive extreme.
res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0, 0, 0, 0, 0, 0])
print(f"all-positive n=6: p = {res.p_value} (exact={res.exact})")

rng = np.random.default_rng(0)
x = rng.normal(size=12)
res = wilcoxon_signed_rank(x + 0.8, x + rng.normal(scale=0.5, size=12))
print(f"shifted pairs: p = {res.p_value:.4f} marker = {significance_marker(res.p_value)!r}")

res = wilcoxon_signed_rank(x, x)
print(f"identical pairs: p = {res.p_value} degenerate = {res.degenerate}")
