"""Figure emission from a benchmark report.

One file per figure type, each with an adjacent CSV holding exactly the
numbers that were plotted; no arithmetic happens here beyond layout, so every
plotted value traces back to a metrics or CKA output in the report.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import group_structures
from .phantoms import STRUCTURE_GROUPS


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_overall_dsc(report, plots_dir: Path) -> list[Path]:
    cells = report["cells"]
    methods = [row["method"] for row in cells[0]["rows"]]
    fig, axes = plt.subplots(1, len(cells), figsize=(4.2 * len(cells), 3.4),
                             squeeze=False)
    rows = []
    for ax, cell in zip(axes[0], cells):
        values = [row["mean_dsc"] for row in cell["rows"]]
        ax.bar(range(len(methods)), values, color="tab:blue")
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=60, ha="right", fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel("mean DSC")
        ax.set_title(f"modality {cell['modality']}, shots {cell['shots']}")
        rows += [
            (cell["modality"], cell["shots"], m, v) for m, v in zip(methods, values)
        ]
    png = plots_dir / "overall_dsc.png"
    _save(fig, png)
    _write_csv(plots_dir / "overall_dsc.csv",
               ["modality", "shots", "method", "mean_dsc"], rows)
    return [png, plots_dir / "overall_dsc.csv"]


def _grouped_means(result_rows, structures):
    per_structure = {
        s: float(np.mean([r["per_structure_mean"][s] for r in result_rows]))
        for s in structures
    }
    grouping = {g: m for g, m in STRUCTURE_GROUPS.items()
                if all(s in per_structure for s in m)}
    covered = {s for members in grouping.values() for s in members}
    leftovers = {s: (s,) for s in per_structure if s not in covered}
    return group_structures(per_structure, {**grouping, **leftovers})


def plot_structure_groups(report, plots_dir: Path) -> list[Path]:
    results = report["results"]
    structures = report["structures"]
    keys = sorted({(r["modality"], str(r["shots"])) for r in results})
    methods = sorted({r["method"] for r in results})
    fig, axes = plt.subplots(1, len(keys), figsize=(4.6 * len(keys), 3.4),
                             squeeze=False)
    rows = []
    for ax, (modality, shots) in zip(axes[0], keys):
        groups = None
        series = {}
        for m in methods:
            mine = [r for r in results
                    if r["method"] == m and r["modality"] == modality
                    and str(r["shots"]) == shots]
            means = _grouped_means(mine, structures)
            groups = sorted(means)
            series[m] = [means[g] for g in groups]
            rows += [(modality, shots, m, g, means[g]) for g in groups]
        width = 0.8 / len(methods)
        for i, m in enumerate(methods):
            ax.bar(np.arange(len(groups)) + i * width, series[m], width, label=m)
        ax.set_xticks(np.arange(len(groups)) + 0.4)
        ax.set_xticklabels(groups, fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_title(f"modality {modality}, shots {shots}")
    axes[0][-1].legend(fontsize=5, ncol=2)
    png = plots_dir / "structure_groups.png"
    _save(fig, png)
    _write_csv(plots_dir / "structure_groups.csv",
               ["modality", "shots", "method", "group", "mean_dsc"], rows)
    return [png, plots_dir / "structure_groups.csv"]


def plot_modality_gap(report, plots_dir: Path) -> list[Path]:
    gaps = report["modality_gaps"]
    if not gaps:
        return []
    shots = gaps[0]["shots"]
    entries = [g for g in gaps if g["shots"] == shots]
    structures = sorted(entries[0]["gap_b_minus_a"])
    methods = [g["method"] for g in entries]
    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(methods), 3.6))
    width = 0.8 / len(structures)
    rows = []
    for i, s in enumerate(structures):
        values = [g["gap_b_minus_a"][s] for g in entries]
        marks = [g["significance"].get(s, {}).get("marker", "") for g in entries]
        xs = np.arange(len(methods)) + i * width
        ax.bar(xs, values, width, label=s)
        for x, v, mk in zip(xs, values, marks):
            if mk:
                ax.text(x, v, mk, ha="center", fontsize=7)
        rows += [
            (m, shots, s, v, mk) for m, v, mk in zip(methods, values, marks)
        ]
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(np.arange(len(methods)) + 0.4)
    ax.set_xticklabels(methods, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("DSC difference (B - A)")
    ax.legend(fontsize=6)
    png = plots_dir / "modality_gap.png"
    _save(fig, png)
    _write_csv(plots_dir / "modality_gap.csv",
               ["method", "shots", "structure", "dsc_gap_b_minus_a", "significance"],
               rows)
    return [png, plots_dir / "modality_gap.csv"]


def plot_training_curves(report, plots_dir: Path) -> list[Path]:
    results = report["results"]
    seed = min(r["seed"] for r in results)
    shots = str(results[0]["shots"])
    modalities = sorted({r["modality"] for r in results})
    fig, axes = plt.subplots(2, len(modalities),
                             figsize=(4.4 * len(modalities), 5.4), squeeze=False)
    rows = []
    for col, modality in enumerate(modalities):
        for r in results:
            if r["seed"] != seed or r["modality"] != modality or str(r["shots"]) != shots:
                continue
            axes[0][col].plot(r["train_loss"], label=r["method"], lw=1)
            axes[1][col].plot(r["val_epochs"], r["val_dsc"], label=r["method"], lw=1)
            rows += [
                (r["method"], modality, e, loss, "")
                for e, loss in enumerate(r["train_loss"])
            ]
            rows += [
                (r["method"], modality, e, "", v)
                for e, v in zip(r["val_epochs"], r["val_dsc"])
            ]
        axes[0][col].set_title(f"train loss, modality {modality}")
        axes[1][col].set_title(f"validation DSC, modality {modality}")
        axes[1][col].set_xlabel("epoch")
    axes[0][0].legend(fontsize=5)
    png = plots_dir / "training_curves.png"
    _save(fig, png)
    _write_csv(plots_dir / "training_curves.csv",
               ["method", "modality", "epoch", "train_loss", "val_dsc"], rows)
    return [png, plots_dir / "training_curves.csv"]


def plot_fewshot_gaps(report, plots_dir: Path) -> list[Path]:
    cells = report["cells"]
    if any(row["gap_percent"] is None for cell in cells for row in cell["rows"]):
        return []
    modalities = sorted({c["modality"] for c in cells})
    methods = [row["method"] for row in cells[0]["rows"]]
    fig, axes = plt.subplots(1, len(modalities),
                             figsize=(4.4 * len(modalities), 3.4), squeeze=False)
    rows = []
    for ax, modality in zip(axes[0], modalities):
        mine = [c for c in cells if c["modality"] == modality]
        xs = [str(c["shots"]) for c in mine]
        for m in methods:
            ys = [next(r["gap_percent"] for r in c["rows"] if r["method"] == m)
                  for c in mine]
            ax.plot(xs, ys, marker="o", label=m, lw=1)
            rows += [(modality, x, m, y) for x, y in zip(xs, ys)]
        ax.set_title(f"modality {modality}")
        ax.set_xlabel("shots")
        ax.set_ylabel("performance gap (%)")
    axes[0][-1].legend(fontsize=5)
    png = plots_dir / "fewshot_gaps.png"
    _save(fig, png)
    _write_csv(plots_dir / "fewshot_gaps.csv",
               ["modality", "shots", "method", "gap_percent"], rows)
    return [png, plots_dir / "fewshot_gaps.csv"]


def plot_cka_profiles(report, plots_dir: Path) -> list[Path]:
    cka_rows = report.get("cka", [])
    if not cka_rows:
        return []
    modalities = sorted({r["modality"] for r in cka_rows})
    methods = sorted({r["method"] for r in cka_rows})
    fig, axes = plt.subplots(1, len(modalities),
                             figsize=(4.6 * len(modalities), 3.4), squeeze=False)
    rows = []
    heat = {}
    for ax, modality in zip(axes[0], modalities):
        for m in methods:
            mine = [r for r in cka_rows if r["method"] == m and r["modality"] == modality]
            values = np.clip(np.mean([r["values"] for r in mine], axis=0), 0, 1)
            taps = mine[0]["taps"]
            ax.plot(range(len(values)), values, marker=".", label=m, lw=1)
            heat[(modality, m)] = values
            rows += [
                (modality, m, i, tap, float(v))
                for i, (tap, v) in enumerate(zip(taps, values))
            ]
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("layer tap")
        ax.set_ylabel("CKA (pretrained vs fine-tuned)")
        ax.set_title(f"modality {modality}")
    axes[0][-1].legend(fontsize=5)
    png = plots_dir / "cka_profiles.png"
    _save(fig, png)
    _write_csv(plots_dir / "cka_profiles.csv",
               ["modality", "method", "tap_index", "tap", "cka"], rows)

    fig, axes = plt.subplots(1, len(modalities),
                             figsize=(4.6 * len(modalities), 3.0), squeeze=False)
    for ax, modality in zip(axes[0], modalities):
        grid = np.stack([heat[(modality, m)] for m in methods])
        im = ax.imshow(grid, vmin=0, vmax=1, aspect="auto", cmap="viridis")
        ax.set_yticks(range(len(methods)))
        ax.set_yticklabels(methods, fontsize=6)
        ax.set_xlabel("layer tap")
        ax.set_title(f"modality {modality}")
        fig.colorbar(im, ax=ax, fraction=0.04)
    heat_png = plots_dir / "cka_heatmap.png"
    _save(fig, heat_png)
    return [png, plots_dir / "cka_profiles.csv", heat_png]


def plot_sweep_curve(sweep_doc: dict, out_dir: Path) -> list[Path]:
    points = sweep_doc["points"]
    keys = sorted({(p["method"], p["modality"]) for p in points})
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    rows = []
    for method, modality in keys:
        sizes = sorted({p["size"] for p in points
                        if p["method"] == method and p["modality"] == modality})
        means, lows, highs = [], [], []
        for size in sizes:
            vals = [p["mean_dsc"] for p in points
                    if p["method"] == method and p["modality"] == modality
                    and p["size"] == size]
            means.append(float(np.mean(vals)))
            lows.append(float(np.min(vals)))
            highs.append(float(np.max(vals)))
            rows.append((method, modality, size, means[-1], lows[-1], highs[-1]))
        ax.plot(sizes, means, marker="o", label=f"{method}/{modality}", lw=1)
        ax.fill_between(sizes, lows, highs, alpha=0.2)
    ax.set_xlabel("pretraining volumes")
    ax.set_ylabel("mean DSC")
    ax.legend(fontsize=6)
    png = out_dir / "sweep_size.png"
    _save(fig, png)
    _write_csv(out_dir / "sweep_size.csv",
               ["method", "modality", "size", "mean_dsc", "min", "max"], rows)
    return [png, out_dir / "sweep_size.csv"]


PLOTTERS = {
    "overall_dsc": plot_overall_dsc,
    "structure_groups": plot_structure_groups,
    "modality_gap": plot_modality_gap,
    "training_curves": plot_training_curves,
    "fewshot_gaps": plot_fewshot_gaps,
    "cka_profiles": plot_cka_profiles,
}


def emit_plots(report: dict, plots_dir) -> dict:
    """Render every applicable figure type; skipped types are reported."""
    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = {}, []
    for name, fn in PLOTTERS.items():
        paths = fn(report, plots_dir)
        if paths:
            written[name] = [str(p) for p in paths]
        else:
            skipped.append(name)
    if skipped:
        print(f"plots skipped (analysis disabled or inapplicable): {', '.join(skipped)}")
    return written
