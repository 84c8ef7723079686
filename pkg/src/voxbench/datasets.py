"""Dataset manifests: which phantom goes to which split, written to disk.

A manifest makes the rest of the pipeline data-source-agnostic: downstream
stages only ever see (volume path, optional label path, modality, split).
Phantom seeds double as patient identities. Pretraining seeds never appear in
any fine-tuning split; train/val/test use disjoint seed blocks, while the two
modalities of one role intentionally share seeds so that cross-modality
comparisons are geometry-paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import storage
from .phantoms import MODALITIES, SPLITS, generate_phantom

FINETUNE_SPLITS = ("train", "val", "test")
DEFAULT_POOL_SIZE = 100_000


@dataclass(frozen=True)
class ManifestEntry:
    volume_path: str
    label_path: str | None
    modality: str
    split: str
    phantom_seed: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        paths = [e.volume_path for e in self.entries]
        if len(paths) != len(set(paths)):
            raise ValueError("manifest volume paths are not unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split tag {e.split!r}")
        pretrain_ids = {e.phantom_seed for e in self.entries if e.split == "pretrain"}
        finetune_ids = {e.phantom_seed for e in self.entries if e.split != "pretrain"}
        shared = pretrain_ids & finetune_ids
        if shared:
            raise ValueError(
                f"phantom seeds {sorted(shared)[:8]} appear in both pretrain and "
                "fine-tuning splits"
            )

    def select(self, split: str | None = None, modality: str | None = None):
        out = self.entries
        if split is not None:
            out = tuple(e for e in out if e.split == split)
        if modality is not None:
            out = tuple(e for e in out if e.modality == modality)
        return out


def _split_counts(config: dict, split: str) -> dict:
    block = config.get(split, {}) or {}
    for mod, count in block.items():
        if mod not in MODALITIES:
            raise ValueError(f"{split}: unknown modality {mod!r}")
        if int(count) < 0:
            raise ValueError(f"{split}/{mod}: negative count {count}")
    return {m: int(c) for m, c in block.items() if int(c) > 0}


def plan_manifest(config: dict) -> DatasetManifest:
    """Allocate seeds and paths without generating any data.

    Seed blocks are laid out in split order (pretrain, train, val, test);
    within a role both modalities reuse the same seeds, giving geometry-paired
    A/B volumes. Explicit ``seed_starts`` may override block origins and are
    validated against the non-overlap rule.
    """
    shape = tuple(int(n) for n in config.get("shape", (32, 32, 32)))
    spacing = tuple(float(s) for s in config.get("spacing", (1.5, 1.5, 2.0)))
    base = int(config.get("seed", 0))
    pool_size = int(config.get("pool_size", DEFAULT_POOL_SIZE))
    seed_starts = config.get("seed_starts", {})

    counts = {split: _split_counts(config, split) for split in SPLITS}
    total = sum(max(c.values(), default=0) for c in counts.values())
    if total > pool_size:
        raise ValueError(f"requested {total} phantoms exceeds pool size {pool_size}")

    entries = []
    cursor = base
    blocks: dict[str, range] = {}
    for split in SPLITS:
        block_size = max(counts[split].values(), default=0)
        start = int(seed_starts.get(split, cursor))
        blocks[split] = range(start, start + block_size)
        cursor = max(cursor, start + block_size)
        for modality in MODALITIES:
            n = counts[split].get(modality, 0)
            for seed in blocks[split][:n]:
                stem = f"{split}_{modality}{seed:05d}"
                entries.append(ManifestEntry(
                    volume_path=f"{stem}.vox",
                    label_path=None if split == "pretrain" else f"{stem}_labels.vox",
                    modality=modality,
                    split=split,
                    phantom_seed=seed,
                ))

    pre = set(blocks["pretrain"])
    for split in FINETUNE_SPLITS:
        overlap = pre & set(blocks[split])
        if overlap:
            raise ValueError(
                f"seed range of split {split!r} overlaps pretrain seeds "
                f"{sorted(overlap)[:8]}"
            )
    return DatasetManifest(entries=tuple(entries), seed=base, shape=shape, spacing=spacing)


def build_manifest(config: dict, out_dir) -> DatasetManifest:
    """Generate all phantoms for ``config`` under ``out_dir`` and persist the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = plan_manifest(config)
    for entry in manifest.entries:
        vol, labels = generate_phantom(
            entry.phantom_seed, entry.modality, manifest.shape, manifest.spacing
        )
        storage.save_volume(out_dir / entry.volume_path, vol)
        if entry.label_path is not None:
            storage.save_labels(out_dir / entry.label_path, labels, manifest.spacing)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "seed": manifest.seed,
        "shape": list(manifest.shape),
        "spacing": list(manifest.spacing),
        "entries": [
            {
                "volume": e.volume_path,
                "labels": e.label_path,
                "modality": e.modality,
                "split": e.split,
                "phantom_seed": e.phantom_seed,
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        doc = json.load(f)
    entries = tuple(
        ManifestEntry(
            volume_path=e["volume"],
            label_path=e["labels"],
            modality=e["modality"],
            split=e["split"],
            phantom_seed=int(e["phantom_seed"]),
        )
        for e in doc["entries"]
    )
    return DatasetManifest(
        entries=entries,
        seed=int(doc["seed"]),
        shape=tuple(doc["shape"]),
        spacing=tuple(doc["spacing"]),
    )
