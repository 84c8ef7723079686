"""Command-line entry point.

Subcommands: phantom, pretrain, finetune, infer, cka, report, run, sweep.
Exit codes: 0 success, 2 configuration error, 3 stage failure. If ``--out``
is omitted, output goes under the directory named by the VOXBENCH_OUT
environment variable (default ``./voxbench_runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _out_dir(args, cfg=None) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get("VOXBENCH_OUT", "voxbench_runs"))
    stem = Path(args.config).stem if getattr(args, "config", None) else "run"
    return root / stem


def _apply_seed(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg = dict(cfg)
        cfg["seed"] = args.seed
    return cfg


def cmd_phantom(args) -> int:
    from . import datasets
    from .experiment import validate_config

    doc = _load_json(args.config)
    dataset = doc["dataset"] if "dataset" in doc else doc
    dataset = dict(dataset)
    dataset.pop("task", None)
    if args.seed is not None:
        dataset["seed"] = args.seed
    out = _out_dir(args)
    manifest = datasets.build_manifest(dataset, out)
    print(f"wrote {len(manifest.entries)} phantom entries under {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .experiment import run_prepare_stages, stage_pretrain

    cfg, out = run_prepare_stages(_apply_seed(_load_json(args.config), args),
                                  _out_dir(args), resume=args.resume)
    stage_pretrain(cfg, out, args.method)
    print(f"pretrained {args.method}: {out / 'pretrain' / args.method}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .experiment import finetune_dir, run_prepare_stages, stage_finetune

    cfg, out = run_prepare_stages(_apply_seed(_load_json(args.config), args),
                                  _out_dir(args), resume=args.resume)
    shots = args.shots if args.shots == "full" else int(args.shots)
    stage_finetune(cfg, out, args.method, args.modality, shots, args.run_seed)
    print(f"fine-tuned: {finetune_dir(out, args.method, args.modality, shots, args.run_seed)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from . import storage
    from .encoder import EncoderConfig
    from .finetune import SegmentorConfig, build_segmentor, sliding_window_infer
    from .experiment import normalize_for_modality
    from .phantoms import LabelMap

    arrays, manifest = storage.load_checkpoint(args.checkpoint)
    seg_meta = manifest.get("segmentor")
    if seg_meta is None:
        raise ValueError(f"{args.checkpoint} is not a segmentor checkpoint")
    cfg_doc = manifest["config"]
    enc_cfg = EncoderConfig(
        depths=tuple(cfg_doc["depths"]), heads=tuple(cfg_doc["heads"]),
        embed_dim=cfg_doc["embed_dim"], input_shape=tuple(cfg_doc["input_shape"]),
        patch_size=tuple(cfg_doc["patch_size"]), window_size=tuple(cfg_doc["window_size"]),
        mlp_ratio=cfg_doc.get("mlp_ratio", 4.0),
    )
    seg_cfg = SegmentorConfig(encoder_cfg=enc_cfg, num_classes=seg_meta["num_classes"],
                              mode=seg_meta["mode"])
    model = build_segmentor(seg_cfg)
    from .encoder import load_parameters

    load_parameters(model, arrays)
    vol = storage.load_volume(args.volume)
    pred = sliding_window_infer(model, normalize_for_modality(vol), args.overlap)
    names = tuple(f"class_{i}" for i in range(seg_cfg.num_classes))
    out = args.out or (str(Path(args.volume).with_suffix("")) + "_pred.vox")
    storage.save_labels(out, LabelMap(labels=pred.astype(np.uint8), class_names=names),
                        vol.spacing)
    print(f"wrote prediction {out}")
    return EXIT_OK


def cmd_cka(args) -> int:
    from . import datasets, storage
    from .cka import layerwise_cka, write_cka_csv
    from .experiment import normalize_for_modality

    manifest = datasets.load_manifest(Path(args.probes) / "manifest.json")
    entries = manifest.select(args.split, args.modality)[: args.count]
    if not entries:
        raise ValueError(f"no {args.split}/{args.modality} probes in {args.probes}")
    probes = [
        normalize_for_modality(storage.load_volume(Path(args.probes) / e.volume_path))
        for e in entries
    ]
    taps = [int(t) for t in args.taps.split(",")] if args.taps else None
    scheme = None
    if args.batches:
        k, bs = (int(x) for x in args.batches.split("x"))
        scheme = (k, bs)
    mat = layerwise_cka(args.ckpt_a, args.ckpt_b, probes, layer_taps=taps,
                        batch_scheme=scheme)
    out = args.out or "cka_profile.csv"
    write_cka_csv(out, mat)
    print(f"wrote {out} ({len(mat.taps)} taps, {mat.probe_count} probes)")
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiment import stage_report, validate_config

    out = Path(args.out) if args.out else _out_dir(args)
    cfg = validate_config(_load_json(out / "config.json"))
    path = stage_report(cfg, out)
    print(f"report: {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _apply_seed(_load_json(args.config), args)
    report_dir = run_experiment(cfg, _out_dir(args), resume=args.resume,
                                jobs=args.jobs)
    print(f"run complete: {report_dir / 'report.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import sweep_pretrain_size

    cfg = _apply_seed(_load_json(args.config), args)
    sizes = [int(s) for s in args.sizes.split(",")]
    out = sweep_pretrain_size(cfg, sizes, _out_dir(args), resume=args.resume,
                              jobs=args.jobs)
    print(f"sweep complete: {out / 'sweep.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxbench",
        description="Desk-scale benchmark of self-supervised pretraining "
                    "transferability for volumetric segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--resume", action="store_true",
                       help="continue a partial run, skipping completed stages")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel worker processes")

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    common(p)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("pretrain", help="pretrain one method")
    common(p)
    p.add_argument("--method", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one segmentor")
    common(p)
    p.add_argument("--method", required=True, help="pretext method or 'scratch'")
    p.add_argument("--modality", required=True, choices=["A", "B"])
    p.add_argument("--shots", default="full")
    p.add_argument("--run-seed", type=int, default=0, help="fine-tuning seed")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("infer", help="sliding-window inference on one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("cka", help="layerwise CKA between two checkpoints")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--probes", required=True, help="data directory with manifest.json")
    p.add_argument("--split", default="test")
    p.add_argument("--modality", default="A", choices=["A", "B"])
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--taps", default=None, help="comma-separated tap indices")
    p.add_argument("--batches", default=None, help="minibatch scheme, e.g. 8x8")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_cka)

    p = sub.add_parser("report", help="assemble report and plots from a run directory")
    p.add_argument("--out", default=None, help="run directory")
    p.set_defaults(fn=cmd_report, config=None)

    p = sub.add_parser("run", help="full pipeline: data, pretrain, finetune, report")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="pretraining-set-size sweep")
    common(p)
    p.add_argument("--sizes", required=True, help="comma-separated sizes, 0 = scratch")
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    from .experiment import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
