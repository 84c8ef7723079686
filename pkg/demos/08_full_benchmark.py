"""End-to-end benchmark on a miniature grid (takes a minute or two on CPU).

Generates data, pretrains two methods, fine-tunes them plus the scratch
baseline in a 2-shot regime on both modalities, and assembles the report with
gaps, significance tests, CKA profiles, and figures. The full desk-scale
configuration lives in the acceptance suite; this demo only shrinks counts.
"""

import json
import tempfile
from pathlib import Path

from voxbench.experiment import run_experiment

config = {
    "seed": 2024,
    "dataset": {
        "pretrain": {"A": 10},
        "train": {"A": 6, "B": 6},
        "val": {"A": 2, "B": 2},
        "test": {"A": 5, "B": 5},
    },
    "methods": ["simmim", "contrastive"],
    "shots": [2],
    "seeds": [0],
    "pretrain": {"steps": 10, "batch_size": 2},
    "finetune": {"epochs": 6, "eval_every": 3},
    "analysis": {"cka_probes": 5},
}

with tempfile.TemporaryDirectory() as d:
    report_dir = run_experiment(config, Path(d) / "demo_run")
    report = json.loads((report_dir / "report.json").read_text())

    print("\nper-cell summary (mean DSC over seeds):")
    for cell in report["cells"]:
        print(f"  modality {cell['modality']}, {cell['shots']}-shot, "
              f"best = {cell['best_method']} ({cell['best_mean_dsc']:.3f})")
        for row in cell["rows"]:
            print(f"    {row['method']:12s} dsc={row['mean_dsc']:.3f} "
                  f"gap={row['gap_percent']:+.1f}%")

    print("\nsignificance vs scratch (paired Wilcoxon):")
    for row in report["significance"]:
        print(f"  {row['modality']}/{row['shots']}-shot {row['method']:12s} "
              f"p={row['p_value']} {row['marker']}")

    plots = sorted(p.name for p in (report_dir / "plots").iterdir())
    print(f"\nfigures written: {plots}")
