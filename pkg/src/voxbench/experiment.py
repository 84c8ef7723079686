"""Experiment orchestration: generate, pretrain, fine-tune, evaluate, analyze.

A run is driven by one JSON config and produces a deterministic artifact tree:

    out_dir/
      config.json             normalized config as run
      data/                   phantom volumes + manifest.json
      pretrain/<method>/      checkpoint.ckpt, losses.csv, stage.json
      finetune/<method>/<modality>/shots_<k>/seed_<s>/
                              checkpoint.ckpt, record.csv, result.json
      analysis/               layerwise CKA CSVs
      report/report.json      consolidated benchmark report
      report/plots/           figures with adjacent CSVs of plotted numbers

Every stage writes a ``stage.json`` marker keyed by a hash of the full config;
re-running a completed stage is a no-op and a changed config is refused. The
master seed fans out into named substreams, so stages are independently
reproducible and parallel workers never share random state. Report JSON
contains no timestamps or absolute paths: the same config yields byte
identical reports.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import datasets, storage
from .cka import layerwise_cka, write_cka_csv
from .encoder import get_preset, save_model_checkpoint
from .finetune import (
    SegmentorConfig,
    build_segmentor,
    finetune_run,
    sliding_window_infer,
    write_train_record,
)
from .metrics import (
    dice_report,
    modality_gap,
    performance_gap,
    significance_marker,
    wilcoxon_signed_rank,
)
from .phantoms import (
    MODALITIES,
    Volume,
    normalize_intensity,
    normalize_percentile,
    relabel_for_task,
)
from .pretext import METHODS, DistillConfig, MethodConfig, run_pretraining, write_loss_log
from .seeding import derive_rng, derive_seed

CONFIG_SCHEMA_VERSION = 1
SCRATCH = "scratch"

#: Desk-scale normalization: modality A gets a fixed window over the raw
#: intensity span, modality B percentile clipping, mirroring CT-window vs
#: MRI-percentile preprocessing.
NORM_WINDOW_A = (0.0, 1000.0)
NORM_PERCENTILES_B = (5.0, 95.0)

#: Full-size training settings, kept as a named reference preset. The desk
#: defaults above are retuned for 32^3 volumes and minute-scale budgets; these
#: are the values used by full-scale runs of this encoder family.
FULL_SCALE_PRESET = {
    "pretrain_lr": 2e-4,
    "pretrain_epochs": 500,
    "finetune_lr": 2e-4,
    "finetune_batch_size": 3,
    "finetune_epochs_manyshot": 1000,
    "finetune_epochs_fewshot": 3000,
    "window_hu_pretrain": (-500.0, 500.0),
    "window_hu_soft_tissue": (-175.0, 250.0),
    "window_mri_lung_tumor": (0.0, 400.0),
    "percentiles_mri_organs": (5.0, 95.0),
}


class ConfigError(Exception):
    """Invalid experiment configuration."""


DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "seed": 1234,
    "dataset": {
        "shape": [32, 32, 32],
        "spacing": [1.5, 1.5, 2.0],
        "pretrain": {"A": 200},
        "train": {"A": 40, "B": 40},
        "val": {"A": 10, "B": 10},
        "test": {"A": 20, "B": 20},
        "task": "organs",
        "pool_size": datasets.DEFAULT_POOL_SIZE,
        "seed_starts": {},
    },
    "encoder_preset": "desk",
    "methods": list(METHODS),
    "include_scratch": True,
    "modalities": ["A", "B"],
    "shots": [5],
    "seeds": [0, 1, 2],
    "pretrain": {
        "steps": 300,
        "batch_size": 4,
        "lr": 1e-3,
        "warmup_steps": 30,
        "steps_per_epoch": None,
    },
    "finetune": {
        "epochs": 200,
        "batch_size": 3,
        "lr": 2e-3,
        "eval_every": 5,
        "early_stop_patience": 20,
        "overlap": 0.5,
    },
    "analysis": {"cka": True, "gaps": True, "wilcoxon": True, "cka_probes": 16},
    "method_overrides": {},
    "jobs": 1,
}


def _merge(defaults, doc, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = {}
    for key, default in defaults.items():
        if key in doc:
            value = doc[key]
            if isinstance(default, dict) and key != "method_overrides" and not path:
                value = _merge(default, value, key)
            out[key] = value
        else:
            out[key] = default
    unknown = sorted(set(doc) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys in {path or '<root>'}: {unknown}")
    return out


def validate_config(doc: dict) -> dict:
    """Fill defaults and validate; raises ConfigError on any violation."""
    cfg = _merge(DEFAULT_CONFIG, doc)
    if cfg["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {cfg['schema_version']}, "
            f"expected {CONFIG_SCHEMA_VERSION}"
        )
    try:
        get_preset(cfg["encoder_preset"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}, have {sorted(METHODS)}")
    for m in cfg["modalities"]:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}")
    shots = cfg["shots"]
    numeric = [s for s in shots if s != "full"]
    if not shots or numeric != sorted(numeric) or any(int(s) < 1 for s in numeric):
        raise ConfigError(f"shots must be ascending positive values, got {shots}")
    if not cfg["seeds"]:
        raise ConfigError("seeds list must be nonempty")
    if cfg["dataset"]["task"] not in ("organs", "tumor"):
        raise ConfigError(f"unknown task {cfg['dataset']['task']!r}")
    for m in cfg["method_overrides"]:
        if m not in METHODS:
            raise ConfigError(f"method_overrides for unknown method {m!r}")
    return cfg


def config_token(cfg: dict) -> str:
    doc = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def method_config(cfg: dict, method: str) -> MethodConfig:
    overrides = dict(cfg["method_overrides"].get(method, {}))
    distill_over = overrides.pop("distill", {})
    distill = DistillConfig(**{
        **{k: tuple(v) if k == "tau_t_schedule" else v for k, v in distill_over.items()}
    })
    return MethodConfig(method=method, distill=distill, **overrides)


# ---------------------------------------------------------------------------
# Data access


def normalize_for_modality(vol: Volume) -> np.ndarray:
    if vol.modality == "A":
        return normalize_intensity(vol, NORM_WINDOW_A).voxels
    return normalize_percentile(vol, *NORM_PERCENTILES_B).voxels


def load_split(data_dir, manifest, split, modality, task=None):
    """Normalized (voxels, labels) pairs for a split; labels None for pretrain."""
    data_dir = Path(data_dir)
    out = []
    for entry in manifest.select(split, modality):
        vol = storage.load_volume(data_dir / entry.volume_path)
        voxels = normalize_for_modality(vol)
        labels = None
        if entry.label_path is not None:
            lab = storage.load_labels(data_dir / entry.label_path)
            if task is not None:
                lab = relabel_for_task(lab, task)
            labels = lab.labels.astype(np.int64)
        out.append((voxels, labels))
    return out


def task_class_names(cfg: dict) -> tuple[str, ...]:
    from .phantoms import CLASS_NAMES

    return CLASS_NAMES[:5] if cfg["dataset"]["task"] == "organs" else ("background", "tumor")


# ---------------------------------------------------------------------------
# Stage plumbing


def _stage_marker(stage_dir: Path) -> Path:
    return stage_dir / "stage.json"


def stage_done(stage_dir: Path, token: str) -> bool:
    marker = _stage_marker(stage_dir)
    if not marker.exists():
        return False
    doc = json.loads(marker.read_text())
    if doc.get("token") != token:
        raise RuntimeError(
            f"stage {stage_dir} was produced by a different config "
            f"({doc.get('token')} != {token}); use a fresh output directory"
        )
    return True


def mark_stage(stage_dir: Path, token: str) -> None:
    _stage_marker(stage_dir).write_text(json.dumps({"done": True, "token": token}))


def stage_data(cfg: dict, out_dir: Path) -> None:
    token = config_token(cfg)
    stage_dir = out_dir / "data"
    if stage_done(stage_dir, token):
        return
    dataset = dict(cfg["dataset"])
    dataset.pop("task", None)
    dataset["seed"] = derive_seed(cfg["seed"], "data") % 10_000
    datasets.build_manifest(dataset, stage_dir)
    mark_stage(stage_dir, token)


def pretrain_checkpoint_path(out_dir: Path, method: str) -> Path:
    return out_dir / "pretrain" / method / "checkpoint.ckpt"


def stage_pretrain(cfg: dict, out_dir: Path, method: str) -> None:
    token = config_token(cfg)
    stage_dir = out_dir / "pretrain" / method
    if stage_done(stage_dir, token):
        return
    stage_dir.mkdir(parents=True, exist_ok=True)
    manifest = datasets.load_manifest(out_dir / "data" / "manifest.json")
    volumes = []
    for modality in cfg["modalities"]:
        volumes += [v for v, _ in load_split(out_dir / "data", manifest, "pretrain", modality)]
    enc_cfg = get_preset(cfg["encoder_preset"])
    pc = cfg["pretrain"]
    state, reports = run_pretraining(
        method_config(cfg, method),
        enc_cfg,
        volumes,
        steps=int(pc["steps"]),
        seed=derive_seed(cfg["seed"], "pretrain", method),
        batch_size=int(pc["batch_size"]),
        base_lr=float(pc["lr"]),
        warmup_steps=int(pc["warmup_steps"]),
        steps_per_epoch=pc["steps_per_epoch"],
    )
    write_loss_log(stage_dir / "losses.csv", reports)
    save_model_checkpoint(
        stage_dir / "checkpoint.ckpt", state.student, enc_cfg,
        step=int(pc["steps"]),
        extra={"method": method, "kind": "pretext", "rng_state": state.rng_state},
    )
    mark_stage(stage_dir, token)


def finetune_dir(out_dir: Path, method, modality, shots, seed) -> Path:
    return out_dir / "finetune" / method / modality / f"shots_{shots}" / f"seed_{seed}"


def stage_finetune(cfg: dict, out_dir: Path, method, modality, shots, seed) -> None:
    token = config_token(cfg)
    stage_dir = finetune_dir(out_dir, method, modality, shots, seed)
    if stage_done(stage_dir, token):
        return
    stage_dir.mkdir(parents=True, exist_ok=True)
    manifest = datasets.load_manifest(out_dir / "data" / "manifest.json")
    task = cfg["dataset"]["task"]
    train = load_split(out_dir / "data", manifest, "train", modality, task)
    val = load_split(out_dir / "data", manifest, "val", modality, task)
    test_entries = manifest.select("test", modality)
    test = load_split(out_dir / "data", manifest, "test", modality, task)

    enc_cfg = get_preset(cfg["encoder_preset"])
    class_names = task_class_names(cfg)
    seg_cfg = SegmentorConfig(
        encoder_cfg=enc_cfg,
        num_classes=len(class_names),
        mode="multiorgan" if task == "organs" else "tumor",
    )
    checkpoint = None if method == SCRATCH else pretrain_checkpoint_path(out_dir, method)
    model = build_segmentor(
        seg_cfg, checkpoint,
        rng=derive_rng(cfg["seed"], "ft-init", method, modality, shots, seed),
    )
    fc = cfg["finetune"]
    best_params, record = finetune_run(
        model,
        train,
        val,
        shots=shots,
        epochs=int(fc["epochs"]),
        seed=derive_seed(cfg["seed"], "ft", method, modality, shots, seed),
        batch_size=int(fc["batch_size"]),
        base_lr=float(fc["lr"]),
        eval_every=int(fc["eval_every"]),
        early_stop_patience=int(fc["early_stop_patience"]),
        overlap=float(fc["overlap"]),
    )
    write_train_record(stage_dir / "record.csv", record)

    from .encoder import load_parameters

    load_parameters(model, best_params)
    save_model_checkpoint(
        stage_dir / "checkpoint.ckpt", model, enc_cfg, step=len(record.train_loss),
        extra={
            "kind": "segmentor",
            "segmentor": {"num_classes": seg_cfg.num_classes, "mode": seg_cfg.mode},
            "method": method, "modality": modality, "shots": str(shots), "seed": seed,
        },
    )

    reports = []
    for entry, (voxels, labels) in zip(test_entries, test):
        pred = sliding_window_infer(model, voxels, float(fc["overlap"]))
        reports.append(dice_report(pred, labels, class_names, volume_id=entry.volume_path))
    per_structure = {
        name: [r.per_structure[name] for r in reports]
        for name in class_names[1:]
    }
    result = {
        "method": method,
        "modality": modality,
        "shots": shots,
        "seed": seed,
        "mean_dsc": float(np.mean([r.mean for r in reports])),
        "per_structure_mean": {k: float(np.mean(v)) for k, v in per_structure.items()},
        "per_volume": [
            {"volume": r.volume_id, "mean": r.mean, "per_structure": r.per_structure,
             "undefined": list(r.undefined)}
            for r in reports
        ],
        "best_epoch": record.best_epoch,
        "best_val_dsc": record.best_val_dsc,
        "early_stop_epoch": record.early_stop_epoch,
        "train_loss": [float(x) for x in record.train_loss],
        "val_epochs": [int(e) for e in record.val_epochs],
        "val_dsc": [float(v) for v in record.val_dsc],
    }
    (stage_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=1))
    mark_stage(stage_dir, token)


def _cka_probes(cfg: dict, out_dir: Path, modality: str):
    manifest = datasets.load_manifest(out_dir / "data" / "manifest.json")
    n = int(cfg["analysis"]["cka_probes"])
    pairs = load_split(out_dir / "data", manifest, "test", modality)
    return [v for v, _ in pairs[:n]]


def stage_analysis(cfg: dict, out_dir: Path) -> None:
    """Layerwise CKA of each pretrained encoder against its fine-tuned
    descendants and against a freshly random-initialized encoder."""
    token = config_token(cfg)
    stage_dir = out_dir / "analysis"
    if stage_done(stage_dir, token):
        return
    stage_dir.mkdir(parents=True, exist_ok=True)
    if cfg["analysis"]["cka"]:
        enc_cfg = get_preset(cfg["encoder_preset"])
        from .encoder import Encoder, init_parameters

        shots = cfg["shots"][0]
        rows = []
        for modality in cfg["modalities"]:
            probes = _cka_probes(cfg, out_dir, modality)
            for method in cfg["methods"]:
                pre_ckpt = pretrain_checkpoint_path(out_dir, method)
                for seed in cfg["seeds"]:
                    ft_ckpt = finetune_dir(out_dir, method, modality, shots, seed) / "checkpoint.ckpt"
                    mat = layerwise_cka(pre_ckpt, ft_ckpt, probes)

                    rand = Encoder(enc_cfg)
                    init_parameters(rand, derive_rng(cfg["seed"], "cka-rand", seed))
                    rand_path = stage_dir / f"random_seed{seed}.ckpt"
                    if not rand_path.exists():
                        save_model_checkpoint(rand_path, rand, enc_cfg, extra={"kind": "encoder"})
                    base = layerwise_cka(pre_ckpt, rand_path, probes)

                    name = f"cka_{method}_{modality}_shots{shots}_seed{seed}"
                    write_cka_csv(stage_dir / f"{name}.csv", mat)
                    rows.append({
                        "method": method, "modality": modality,
                        "shots": shots, "seed": seed,
                        "taps": list(mat.taps),
                        "values": [float(v) for v in mat.values[:, 0]],
                        "baseline_values": [float(v) for v in base.values[:, 0]],
                    })
        (stage_dir / "cka.json").write_text(json.dumps(rows, sort_keys=True, indent=1))
    mark_stage(stage_dir, token)


# ---------------------------------------------------------------------------
# Report assembly


def _all_methods(cfg: dict) -> list[str]:
    methods = list(cfg["methods"])
    if cfg["include_scratch"] and SCRATCH not in methods:
        methods.append(SCRATCH)
    return methods


def _load_results(cfg: dict, out_dir: Path) -> list[dict]:
    rows = []
    for method in _all_methods(cfg):
        for modality in cfg["modalities"]:
            for shots in cfg["shots"]:
                for seed in cfg["seeds"]:
                    path = finetune_dir(out_dir, method, modality, shots, seed) / "result.json"
                    rows.append(json.loads(path.read_text()))
    rows.sort(key=lambda r: (r["method"], r["modality"], str(r["shots"]), r["seed"]))
    return rows


def _volume_means(rows: list[dict]) -> dict:
    """Per-volume mean DSC averaged over seeds, keyed by volume id."""
    acc: dict = {}
    for row in rows:
        for per_vol in row["per_volume"]:
            acc.setdefault(per_vol["volume"], []).append(per_vol["mean"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def _structure_values(rows: list[dict], structure: str) -> dict:
    """Per-volume DSC for one structure, averaged over seeds.

    Keys are phantom seeds (digits of the file name), which pair the same
    geometry across modalities.
    """
    acc: dict = {}
    for row in rows:
        for per_vol in row["per_volume"]:
            key = "".join(ch for ch in per_vol["volume"] if ch.isdigit())
            acc.setdefault(key, []).append(per_vol["per_structure"][structure])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def assemble_report(cfg: dict, out_dir: Path) -> dict:
    """Consolidate all stage outputs into one benchmark report document."""
    results = _load_results(cfg, out_dir)
    methods = _all_methods(cfg)
    class_names = task_class_names(cfg)
    structures = list(class_names[1:])

    by_key: dict = {}
    for row in results:
        key = (row["method"], row["modality"], str(row["shots"]))
        by_key.setdefault(key, []).append(row)

    cells = []
    for modality in cfg["modalities"]:
        for shots in cfg["shots"]:
            means = {
                m: float(np.mean([r["mean_dsc"] for r in by_key[(m, modality, str(shots))]]))
                for m in methods
            }
            best_method = max(sorted(means), key=lambda m: means[m])
            acc_ref = means[best_method]
            rows = [
                {
                    "method": m,
                    "mean_dsc": means[m],
                    "gap_percent": performance_gap(means[m], acc_ref)
                    if cfg["analysis"]["gaps"] else None,
                }
                for m in methods
            ]
            cells.append({
                "modality": modality,
                "shots": shots,
                "best_method": best_method,
                "best_mean_dsc": acc_ref,
                "rows": rows,
            })

    significance = []
    if cfg["analysis"]["wilcoxon"] and SCRATCH in methods:
        for modality in cfg["modalities"]:
            for shots in cfg["shots"]:
                base = _volume_means(by_key[(SCRATCH, modality, str(shots))])
                for m in methods:
                    if m == SCRATCH:
                        continue
                    mine = _volume_means(by_key[(m, modality, str(shots))])
                    vols = sorted(base)
                    row = {"modality": modality, "shots": shots,
                           "method": m, "vs": SCRATCH}
                    try:
                        res = wilcoxon_signed_rank(
                            [mine[v] for v in vols], [base[v] for v in vols]
                        )
                        row.update(p_value=res.p_value, n=res.n,
                                   degenerate=res.degenerate,
                                   marker=significance_marker(res.p_value))
                    except ValueError as e:  # too few non-zero differences
                        row.update(p_value=None, n=len(vols), degenerate=False,
                                   marker="", note=str(e))
                    significance.append(row)

    modality_gaps = []
    if cfg["analysis"]["gaps"] and set(cfg["modalities"]) == {"A", "B"}:
        for shots in cfg["shots"]:
            for m in methods:
                rows_a = by_key[(m, "A", str(shots))]
                rows_b = by_key[(m, "B", str(shots))]
                per_a = {s: _structure_values(rows_a, s) for s in structures}
                per_b = {s: _structure_values(rows_b, s) for s in structures}
                gaps = modality_gap(
                    {s: list(per_a[s].values()) for s in structures},
                    {s: list(per_b[s].values()) for s in structures},
                )
                stars = {}
                for s in structures:
                    keys = sorted(set(per_a[s]) & set(per_b[s]))
                    if len(keys) < 5:
                        continue
                    try:
                        res = wilcoxon_signed_rank(
                            [per_b[s][k] for k in keys], [per_a[s][k] for k in keys]
                        )
                        stars[s] = {
                            "p_value": res.p_value,
                            "marker": significance_marker(res.p_value),
                            "degenerate": res.degenerate,
                        }
                    except ValueError:
                        pass  # too few non-zero differences
                modality_gaps.append({
                    "method": m, "shots": shots,
                    "gap_b_minus_a": gaps, "significance": stars,
                })

    cka_rows = []
    cka_path = out_dir / "analysis" / "cka.json"
    if cfg["analysis"]["cka"] and cka_path.exists():
        cka_rows = json.loads(cka_path.read_text())

    report_cfg = dict(cfg)
    report_cfg.pop("jobs", None)
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "config": report_cfg,
        "task": cfg["dataset"]["task"],
        "structures": structures,
        "results": results,
        "cells": cells,
        "significance": significance,
        "modality_gaps": modality_gaps,
        "cka": cka_rows,
    }


def stage_report(cfg: dict, out_dir: Path) -> Path:
    token = config_token(cfg)
    stage_dir = out_dir / "report"
    report_path = stage_dir / "report.json"
    if stage_done(stage_dir, token):
        return report_path
    stage_dir.mkdir(parents=True, exist_ok=True)
    report = assemble_report(cfg, out_dir)
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1))
    from .plots import emit_plots

    emit_plots(report, stage_dir / "plots")
    mark_stage(stage_dir, token)
    return report_path


# ---------------------------------------------------------------------------
# Orchestration


def _worker(payload: dict) -> str:
    torch.set_num_threads(1)
    out_dir = Path(payload["out_dir"])
    cfg = json.loads((out_dir / "config.json").read_text())
    kind = payload["kind"]
    if kind == "pretrain":
        stage_pretrain(cfg, out_dir, payload["method"])
    elif kind == "finetune":
        stage_finetune(cfg, out_dir, payload["method"], payload["modality"],
                       payload["shots"], payload["seed"])
    else:
        raise ValueError(f"unknown job kind {kind!r}")
    return kind


def _run_jobs(jobs: list[dict], n_workers: int, stage_name: str) -> None:
    if n_workers <= 1 or len(jobs) <= 1:
        for payload in jobs:
            _run_job_inline(payload)
        return
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx) as pool:
        futures = [pool.submit(_worker, payload) for payload in jobs]
        for payload, fut in zip(jobs, futures):
            try:
                fut.result()
            except Exception as e:
                raise RuntimeError(
                    f"stage {stage_name} failed for {payload}: {e}"
                ) from e


def _run_job_inline(payload: dict) -> None:
    out_dir = Path(payload["out_dir"])
    cfg = json.loads((out_dir / "config.json").read_text())
    if payload["kind"] == "pretrain":
        stage_pretrain(cfg, out_dir, payload["method"])
    else:
        stage_finetune(cfg, out_dir, payload["method"], payload["modality"],
                       payload["shots"], payload["seed"])


def run_prepare_stages(config: dict, out_dir, *, resume: bool = False):
    """Validate config, persist it under out_dir, and ensure data exists.

    Shared entry for single-stage CLI commands; returns (cfg, out_dir).
    """
    cfg = validate_config(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.json"
    cfg_doc = json.dumps(cfg, sort_keys=True, indent=1)
    if config_path.exists() and config_path.read_text() != cfg_doc:
        raise RuntimeError(
            f"{out_dir} already holds a run with a different config; "
            "use a fresh output directory"
        )
    config_path.write_text(cfg_doc)
    stage_data(cfg, out_dir)
    return cfg, out_dir


def run_experiment(config: dict, out_dir, *, resume: bool = False,
                   jobs: int | None = None) -> Path:
    """Run the full pipeline; returns the path of the report directory.

    An existing output directory with partial results is refused unless
    ``resume`` is set, in which case completed stages (hash-checked against
    the config) are skipped.
    """
    cfg = validate_config(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.json"
    cfg_doc = json.dumps(cfg, sort_keys=True, indent=1)
    if config_path.exists():
        prior_partial = not (out_dir / "report" / "stage.json").exists()
        if config_path.read_text() != cfg_doc:
            raise RuntimeError(
                f"{out_dir} already holds a run with a different config; "
                "use a fresh output directory"
            )
        if prior_partial and not resume:
            raise RuntimeError(
                f"{out_dir} holds a partial prior run; pass resume=True to continue "
                "or use a fresh output directory"
            )
    config_path.write_text(cfg_doc)
    n_workers = int(cfg["jobs"] if jobs is None else jobs)

    stage_data(cfg, out_dir)
    pretrain_jobs = [
        {"kind": "pretrain", "out_dir": str(out_dir), "method": m}
        for m in cfg["methods"]
        if not (out_dir / "pretrain" / m / "stage.json").exists()
    ]
    _run_jobs(pretrain_jobs, n_workers, "pretrain")
    for m in cfg["methods"]:  # surfaces config-token mismatches when resuming
        stage_pretrain(cfg, out_dir, m)

    ft_jobs = []
    for method in _all_methods(cfg):
        for modality in cfg["modalities"]:
            for shots in cfg["shots"]:
                for seed in cfg["seeds"]:
                    if not (finetune_dir(out_dir, method, modality, shots, seed)
                            / "stage.json").exists():
                        ft_jobs.append({
                            "kind": "finetune", "out_dir": str(out_dir),
                            "method": method, "modality": modality,
                            "shots": shots, "seed": seed,
                        })
    _run_jobs(ft_jobs, n_workers, "finetune")
    for method in _all_methods(cfg):
        for modality in cfg["modalities"]:
            for shots in cfg["shots"]:
                for seed in cfg["seeds"]:
                    stage_finetune(cfg, out_dir, method, modality, shots, seed)

    stage_analysis(cfg, out_dir)
    stage_report(cfg, out_dir)
    return out_dir / "report"


# ---------------------------------------------------------------------------
# Sweeps


def sweep_pretrain_size(config: dict, sizes: list[int], out_dir, *,
                        resume: bool = False, jobs: int | None = None) -> Path:
    """One pretrain+finetune pipeline per pretraining-set size.

    Size 0 is the pure scratch baseline (no pretraining stage executed).
    Emits a DSC-versus-size table with per-seed spread plus a curve figure.
    """
    cfg = validate_config(config)
    if sorted(sizes) != list(sizes):
        raise ConfigError(f"sizes must be ascending, got {sizes}")
    pool = int(cfg["dataset"].get("pool_size", datasets.DEFAULT_POOL_SIZE))
    if any(s > pool for s in sizes):
        raise ConfigError(f"sizes {sizes} exceed the phantom pool {pool}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    points = []
    for size in sizes:
        sub = json.loads(json.dumps(cfg))
        sub.pop("jobs", None)
        sub["analysis"] = {**cfg["analysis"], "cka": False}
        if size == 0:
            sub["methods"] = []
            sub["include_scratch"] = True
        else:
            sub["dataset"]["pretrain"] = {"A": int(size)}
            sub["include_scratch"] = False
        sub_dir = out_dir / f"size_{size}"
        run_experiment(sub, sub_dir, resume=resume, jobs=jobs or cfg["jobs"])
        report = json.loads((sub_dir / "report" / "report.json").read_text())
        for row in report["results"]:
            points.append({
                "size": size,
                "method": row["method"],
                "modality": row["modality"],
                "shots": row["shots"],
                "seed": row["seed"],
                "mean_dsc": row["mean_dsc"],
            })

    sweep_doc = {"sizes": list(sizes), "points": points}
    (out_dir / "sweep.json").write_text(json.dumps(sweep_doc, sort_keys=True, indent=1))
    from .plots import plot_sweep_curve

    plot_sweep_curve(sweep_doc, out_dir)
    return out_dir

