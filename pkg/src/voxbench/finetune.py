"""Segmentation fine-tuning on top of any pretrained (or random) encoder.

The segmentor pairs the windowed-attention encoder with a convolutional
decoder: one up-sampling stage per encoder stage, skip connections by channel
concatenation, conv + batch norm + LeakyReLU blocks, and a single bridging
convolution between the deepest encoder features and the first decoder layer.
Fine-tuning covers few-shot (first-k of a seed-shuffled manifest, so shot sets
are nested across k) and many-shot regimes with periodic validation, best
checkpoint tracking, and early stopping on mean validation Dice. Whole-volume
prediction tiles overlapping windows and averages their logits uniformly.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import (
    Encoder,
    EncoderConfig,
    ParameterSet,
    config_hash,
    extract_encoder_arrays,
    init_parameters,
    load_parameters,
)

SEG_MODES = ("multiorgan", "tumor")
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class SegmentorConfig:
    encoder_cfg: EncoderConfig
    num_classes: int = 5
    mode: str = "multiorgan"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.mode not in SEG_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {SEG_MODES}")
        if self.mode == "tumor" and self.num_classes != 2:
            raise ValueError("tumor mode is binary (num_classes must be 2)")

    @property
    def out_channels(self) -> int:
        return 1 if self.mode == "tumor" else self.num_classes


class ConvBlock(nn.Module):
    """conv3d + batch norm + LeakyReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm3d(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class Segmentor(nn.Module):
    """Encoder plus mirrored convolutional decoder with skip connections."""

    def __init__(self, cfg: SegmentorConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_cfg
        self.encoder = Encoder(enc)
        widths = [enc.stage_width(s) for s in range(4)]
        stem_ch = max(8, enc.embed_dim // 2)

        self.stem = ConvBlock(1, stem_ch)
        self.bridge = nn.Sequential(
            nn.Conv3d(widths[3], widths[3], 3, padding=1, bias=False),
            nn.BatchNorm3d(widths[3]),
            nn.LeakyReLU(0.01, inplace=True),
        )
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        chans = [stem_ch] + widths  # skip channels at each resolution, fine to coarse
        for level in range(4, 0, -1):
            in_ch = chans[level] if level == 4 else chans[level]
            out_ch = chans[level - 1]
            self.ups.append(nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2))
            self.blocks.append(ConvBlock(2 * out_ch, out_ch))
        self.head = nn.Conv3d(stem_ch, cfg.out_channels, kernel_size=1)

    def forward(self, x):
        # x: (B, 1, Z, Y, X) -> logits (B, out_channels, Z, Y, X)
        skips = [self.stem(x)]
        feats = self.encoder(x)
        skips += [f.permute(0, 4, 1, 2, 3) for f in feats]
        y = self.bridge(skips[4])
        for i, level in enumerate(range(4, 0, -1)):
            y = self.ups[i](y)
            y = self.blocks[i](torch.cat([y, skips[level - 1]], dim=1))
        return self.head(y)


def build_segmentor(
    cfg: SegmentorConfig,
    checkpoint=None,
    rng: np.random.Generator | None = None,
) -> Segmentor:
    """Fresh segmentor; encoder weights optionally loaded from a checkpoint.

    The decoder is always freshly initialized. A checkpoint is accepted only
    if its encoder config hash matches ``cfg.encoder_cfg``.
    """
    from . import storage

    model = Segmentor(cfg)
    init_parameters(model, rng if rng is not None else np.random.default_rng(0))
    if checkpoint is not None:
        arrays, manifest = storage.load_checkpoint(checkpoint)
        want = config_hash(cfg.encoder_cfg)
        have = manifest.get("config_hash")
        if have != want:
            raise ValueError(
                f"checkpoint encoder hash {have} incompatible with segmentor "
                f"encoder hash {want}"
            )
        load_parameters(model.encoder, extract_encoder_arrays(arrays))
    return model


# ---------------------------------------------------------------------------
# Loss


def _soft_dice(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    # probs/onehot: (B, C_fg, Z, Y, X); returns mean soft Dice over classes
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return ((2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, mode: str = "multiorgan") -> torch.Tensor:
    """Even mixture of cross-entropy and soft-Dice over foreground classes.

    ``multiorgan`` expects (B, C, Z, Y, X) logits and integer labels;
    ``tumor`` expects single-channel logits and binary labels, optimized with
    binary cross-entropy plus binary soft Dice.
    """
    if mode not in SEG_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "multiorgan":
        n_classes = logits.shape[1]
        if int(labels.max()) >= n_classes:
            raise ValueError(
                f"label class {int(labels.max())} out of range for {n_classes} classes"
            )
        ce = F.cross_entropy(logits, labels)
        probs = F.softmax(logits, dim=1)
        onehot = F.one_hot(labels, n_classes).permute(0, 4, 1, 2, 3).to(logits.dtype)
        dice = _soft_dice(probs[:, 1:], onehot[:, 1:])
    else:
        if logits.dim() == 5:
            if logits.shape[1] != 1:
                raise ValueError("tumor mode expects single-channel logits")
            logits = logits[:, 0]
        if int(labels.max()) > 1:
            raise ValueError("tumor mode expects binary labels")
        target = labels.to(logits.dtype)
        ce = F.binary_cross_entropy_with_logits(logits, target)
        probs = torch.sigmoid(logits)
        dice = _soft_dice(probs.unsqueeze(1), target.unsqueeze(1))
    return 0.5 * ce + 0.5 * (1 - dice)


# ---------------------------------------------------------------------------
# Crop sampling


@dataclass(frozen=True)
class CropBatch:
    crops: tuple  # of (volume crop, label crop, contains_foreground)
    crop_shape: tuple[int, int, int]


def _crop_at(arr, start, shape):
    return arr[tuple(slice(s, s + c) for s, c in zip(start, shape))]


def sample_crops(
    voxels: np.ndarray,
    labels: np.ndarray,
    crop_shape,
    n_crops: int,
    foreground_ratio: float = 0.5,
    rng: np.random.Generator | None = None,
) -> CropBatch:
    """Alternating foreground/background crops at the configured ratio.

    Foreground crop centers are drawn from labeled voxels; background crops
    avoid foreground when an empty window can be found. If the label map has
    no foreground at all, every crop is background and a warning is issued.
    """
    crop_shape = tuple(int(c) for c in crop_shape)
    if any(c > n for c, n in zip(crop_shape, voxels.shape)):
        raise ValueError(f"crop shape {crop_shape} exceeds volume shape {voxels.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)
    fg_coords = np.argwhere(labels > 0)
    n_fg = int(round(n_crops * foreground_ratio))
    if len(fg_coords) == 0 and n_fg > 0:
        warnings.warn("label map has no foreground; sampling background crops only")
        n_fg = 0
    max_start = [n - c for n, c in zip(voxels.shape, crop_shape)]

    flags = []
    remaining_fg, remaining_bg = n_fg, n_crops - n_fg
    for i in range(n_crops):
        take_fg = (i % 2 == 0 and remaining_fg > 0) or remaining_bg == 0
        flags.append(take_fg)
        if take_fg:
            remaining_fg -= 1
        else:
            remaining_bg -= 1

    crops = []
    for want_fg in flags:
        if want_fg:
            center = fg_coords[int(rng.integers(len(fg_coords)))]
            start = [
                int(np.clip(c - cs // 2, 0, ms))
                for c, cs, ms in zip(center, crop_shape, max_start)
            ]
        else:
            start = None
            for _ in range(20):
                cand = [int(rng.integers(0, ms + 1)) for ms in max_start]
                if not _crop_at(labels, cand, crop_shape).any():
                    start = cand
                    break
            if start is None:  # volume too crowded for an empty window
                start = [int(rng.integers(0, ms + 1)) for ms in max_start]
        vox_crop = np.ascontiguousarray(_crop_at(voxels, start, crop_shape))
        lab_crop = np.ascontiguousarray(_crop_at(labels, start, crop_shape))
        crops.append((vox_crop, lab_crop, bool(lab_crop.any())))
    return CropBatch(crops=tuple(crops), crop_shape=crop_shape)


# ---------------------------------------------------------------------------
# Sliding-window inference


def window_starts(length: int, window: int, overlap: float) -> list[int]:
    """Start offsets along one axis: stride window*(1-overlap), last clamped."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if window >= length:
        return [0]
    stride = max(1, int(round(window * (1 - overlap))))
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def sliding_window_logits(
    model: Segmentor,
    voxels: np.ndarray,
    overlap: float = 0.5,
) -> np.ndarray:
    """Averaged per-class logits over all overlapping windows, (C, Z, Y, X).

    Volumes smaller than the window are reflection-padded, predicted, and
    cropped back. Accumulation order is fixed, so results are deterministic.
    """
    window = model.cfg.encoder_cfg.input_shape
    orig_shape = voxels.shape
    pads = [(0, max(0, w - n)) for n, w in zip(orig_shape, window)]
    if any(p[1] for p in pads):
        voxels = np.pad(voxels, pads, mode="reflect")
    model.eval()
    out_ch = model.cfg.out_channels
    acc = np.zeros((out_ch, *voxels.shape), dtype=np.float64)
    cnt = np.zeros(voxels.shape, dtype=np.float64)
    starts = [window_starts(n, w, overlap) for n, w in zip(voxels.shape, window)]
    with torch.no_grad():
        for sz, sy, sx in itertools.product(*starts):
            sl = (slice(sz, sz + window[0]), slice(sy, sy + window[1]),
                  slice(sx, sx + window[2]))
            tile = torch.from_numpy(voxels[sl].astype(np.float32))[None, None]
            logits = model(tile)[0].numpy()
            acc[(slice(None), *sl)] += logits
            cnt[sl] += 1.0
    if cnt.min() < 1:
        raise RuntimeError("sliding window left voxels uncovered")
    avg = acc / cnt
    return avg[(slice(None), *(slice(0, n) for n in orig_shape))]


def sliding_window_infer(model: Segmentor, voxels: np.ndarray,
                         overlap: float = 0.5) -> np.ndarray:
    """Predicted integer label map via uniform logit averaging and argmax."""
    logits = sliding_window_logits(model, voxels, overlap)
    if model.cfg.mode == "tumor":
        return (logits[0] > 0).astype(np.uint8)
    return np.argmax(logits, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Fine-tuning loop


@dataclass
class TrainRunRecord:
    """Per-epoch training loss and periodic validation accuracy."""

    shots: int | str
    epochs: int
    train_loss: list[float] = field(default_factory=list)
    val_epochs: list[int] = field(default_factory=list)
    val_dsc: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_dsc: float | None = None
    early_stop_epoch: int | None = None

    def to_rows(self):
        val = dict(zip(self.val_epochs, self.val_dsc))
        return [
            {"epoch": e, "train_loss": loss, "val_dsc": val.get(e, "")}
            for e, loss in enumerate(self.train_loss)
        ]


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    from .metrics import dice

    scores = [dice(pred == c, gt == c) for c in range(1, num_classes)]
    return float(np.mean(scores))


def evaluate_mean_dice(model: Segmentor, data, overlap: float = 0.5,
                       batch_size: int = 5) -> float:
    """Mean over volumes of the mean foreground-class Dice.

    Volumes matching the window shape exactly are predicted in batches; the
    result equals per-volume sliding-window inference.
    """
    window = model.cfg.encoder_cfg.input_shape
    scores = []
    direct = [i for i, (v, _) in enumerate(data) if v.shape == window]
    tiled = [i for i in range(len(data)) if i not in direct]
    model.eval()
    with torch.no_grad():
        for start in range(0, len(direct), batch_size):
            idx = direct[start:start + batch_size]
            x = torch.from_numpy(np.stack([data[i][0] for i in idx]).astype(np.float32))
            logits = model(x[:, None]).numpy()
            for row, i in enumerate(idx):
                if model.cfg.mode == "tumor":
                    pred = (logits[row, 0] > 0).astype(np.uint8)
                else:
                    pred = np.argmax(logits[row], axis=0).astype(np.uint8)
                scores.append(mean_foreground_dice(pred, data[i][1],
                                                   model.cfg.num_classes))
    for i in tiled:
        pred = sliding_window_infer(model, data[i][0], overlap)
        scores.append(mean_foreground_dice(pred, data[i][1], model.cfg.num_classes))
    return float(np.mean(scores))


def select_shots(n_train: int, shots, seed: int) -> np.ndarray:
    """First-k of a seed-shuffled index list; k1 < k2 gives nested sets."""
    from .seeding import derive_rng

    order = derive_rng(seed, "shots").permutation(n_train)
    if shots == "full":
        return order
    shots = int(shots)
    if shots > n_train:
        raise ValueError(f"requested {shots} shots but only {n_train} training volumes")
    return order[:shots]


def finetune_run(
    segmentor: Segmentor,
    train_data,
    val_data,
    *,
    shots="full",
    epochs: int = 200,
    seed: int = 0,
    batch_size: int = 3,
    base_lr: float = 2e-3,
    eval_every: int = 5,
    early_stop_patience: int = 20,
    crops_per_volume: int = 1,
    crop_shape=None,
    foreground_ratio: float = 0.5,
    overlap: float = 0.5,
) -> tuple[ParameterSet, TrainRunRecord]:
    """Supervised fine-tuning; returns the best-validation parameter set.

    ``train_data``/``val_data`` are sequences of (voxels, labels) numpy pairs,
    already normalized. Deterministic for fixed seed. ``epochs=0`` returns the
    initialization unchanged with an empty record.
    """
    from .seeding import derive_rng

    if not val_data:
        raise ValueError("validation split is empty")
    chosen = select_shots(len(train_data), shots, seed)
    train = [train_data[i] for i in chosen]
    record = TrainRunRecord(shots=shots, epochs=epochs)
    best_params = ParameterSet.from_module(segmentor)
    if epochs == 0:
        return best_params, record

    mode = segmentor.cfg.mode
    window = segmentor.cfg.encoder_cfg.input_shape
    crop_shape = tuple(crop_shape) if crop_shape is not None else window
    optimizer = torch.optim.AdamW(segmentor.parameters(), lr=base_lr)
    rng = derive_rng(seed, "finetune-loop")
    best_dsc = -1.0
    evals_since_best = 0

    for epoch in range(epochs):
        for group in optimizer.param_groups:
            group["lr"] = 0.5 * base_lr * (1 + math.cos(math.pi * epoch / epochs))
        samples = []
        for voxels, labels in train:
            if crop_shape == voxels.shape and crops_per_volume == 1:
                samples.append((voxels, labels))
            else:
                batch = sample_crops(voxels, labels, crop_shape, crops_per_volume,
                                     foreground_ratio, rng)
                samples += [(v, l) for v, l, _ in batch.crops]
        order = rng.permutation(len(samples))
        # a trailing singleton joins the previous batch: batch statistics are
        # undefined for one sample at the 1-voxel bottleneck
        bounds = list(range(0, len(order), batch_size)) + [len(order)]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            bounds.pop(-2)
        segmentor.train()
        losses = []
        for i, j in zip(bounds, bounds[1:]):
            idx = order[i:j]
            vox = torch.from_numpy(np.stack([samples[j][0] for j in idx]).astype(np.float32))
            lab = torch.from_numpy(np.stack([samples[j][1] for j in idx]).astype(np.int64))
            loss = seg_loss(segmentor(vox[:, None]), lab, mode)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        record.train_loss.append(float(np.mean(losses)))

        last_epoch = epoch == epochs - 1
        if (epoch + 1) % eval_every == 0 or last_epoch:
            dsc = evaluate_mean_dice(segmentor, val_data, overlap)
            record.val_epochs.append(epoch)
            record.val_dsc.append(dsc)
            if dsc > best_dsc:
                best_dsc = dsc
                record.best_epoch = epoch
                record.best_val_dsc = dsc
                best_params = ParameterSet.from_module(segmentor)
                evals_since_best = 0
            else:
                evals_since_best += 1
            if evals_since_best >= early_stop_patience:
                record.early_stop_epoch = epoch
                break
    return best_params, record


def write_train_record(path, record: TrainRunRecord) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_dsc"])
        writer.writeheader()
        for row in record.to_rows():
            writer.writerow(row)
