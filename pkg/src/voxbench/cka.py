"""Feature-reuse quantification via centered kernel alignment.

Linear-kernel CKA built on the unbiased HSIC estimator (diagonals zeroed,
n(n-3) normalization), so small-batch estimates are usable: the minibatch
variant averages per-batch HSIC values for the numerator and both denominator
terms separately before combining them. Layerwise profiles compare two
checkpoints of the same encoder config on a probe set, tapping every
transformer block output (plus the patch embedding) after spatial mean
pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import (
    Encoder,
    EncoderConfig,
    extract_encoder_arrays,
    load_parameters,
    tap_names,
)

MIN_UNBIASED_N = 4


@dataclass(frozen=True)
class FeatureMatrix:
    """n probe samples by d feature dimensions for one layer of one model."""

    X: np.ndarray
    layer_id: int = 0
    model_id: str = ""

    def __post_init__(self):
        if self.X.ndim != 2:
            raise ValueError(f"feature matrix must be 2D, got ndim={self.X.ndim}")
        if self.X.shape[0] < MIN_UNBIASED_N:
            raise ValueError(
                f"need at least {MIN_UNBIASED_N} probe samples, got {self.X.shape[0]}"
            )
        if not np.isfinite(self.X).all():
            raise ValueError("feature matrix contains non-finite entries")


def _as_matrix(x) -> np.ndarray:
    arr = x.X if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D sample-by-feature matrix, got ndim={arr.ndim}")
    return arr


def gram_linear(x) -> np.ndarray:
    """Linear-kernel Gram matrix K = X X^T."""
    arr = _as_matrix(x)
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError("features contain non-finite entries")
    return arr @ arr.T


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC estimator on two symmetric Gram matrices.

    Diagonals are zeroed internally; the estimate is exchangeable under any
    simultaneous row/column permutation of K and L, and has expectation zero
    for independent features.
    """
    k = np.asarray(k, dtype=float)
    l = np.asarray(l, dtype=float)
    n = k.shape[0]
    if k.shape != (n, n) or l.shape != (n, n):
        raise ValueError(f"Gram matrices must be square and equal-sized, got {k.shape}, {l.shape}")
    if n < MIN_UNBIASED_N:
        raise ValueError(f"unbiased HSIC needs n >= {MIN_UNBIASED_N}, got n={n}")
    kt = k - np.diag(np.diag(k))
    lt = l - np.diag(np.diag(l))
    term1 = float(np.sum(kt * lt))
    term2 = kt.sum() * lt.sum() / ((n - 1) * (n - 2))
    term3 = 2.0 / (n - 2) * float(kt.sum(axis=1) @ lt.sum(axis=1))
    return (term1 + term2 - term3) / (n * (n - 3))


def _hsic_triplet(x, y) -> tuple[float, float, float]:
    k = gram_linear(x)
    l = gram_linear(y)
    return hsic_unbiased(k, l), hsic_unbiased(k, k), hsic_unbiased(l, l)


def _combine(hxy: float, hxx: float, hyy: float) -> float:
    if hxx <= 0 or hyy <= 0:
        raise ValueError(
            "degenerate features: self-HSIC is not positive (constant features?)"
        )
    return hxy / math.sqrt(hxx * hyy)


def cka(x, y) -> float:
    """Normalized similarity of two representations on the same samples.

    May be slightly negative due to the unbiased estimator; clamp only when
    reporting.
    """
    xa, ya = _as_matrix(x), _as_matrix(y)
    if xa.shape[0] != ya.shape[0]:
        raise ValueError(f"sample counts differ: {xa.shape[0]} vs {ya.shape[0]}")
    return _combine(*_hsic_triplet(xa, ya))


def minibatch_cka(
    stream_x,
    stream_y,
    k: int,
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> float:
    """CKA with each HSIC term averaged over k minibatches.

    The streams must be aligned sample-for-sample. Batches are contiguous
    after an optional one-time shuffle (pass ``rng``); per-batch HSIC values
    are accumulated with exact summation, so batch order does not matter.
    """
    xs = _as_matrix(stream_x)
    ys = _as_matrix(stream_y)
    if xs.shape[0] != ys.shape[0]:
        raise ValueError(
            f"misaligned streams: {xs.shape[0]} vs {ys.shape[0]} samples"
        )
    if batch_size < MIN_UNBIASED_N:
        raise ValueError(f"batch size must be >= {MIN_UNBIASED_N}, got {batch_size}")
    if k < 1:
        raise ValueError(f"need at least one batch, got k={k}")
    if k * batch_size > xs.shape[0]:
        raise ValueError(
            f"{k} batches of {batch_size} exceed the {xs.shape[0]} available samples"
        )
    idx = np.arange(xs.shape[0])
    if rng is not None:
        idx = rng.permutation(idx)
    nums, dxs, dys = [], [], []
    for b in range(k):
        sel = idx[b * batch_size:(b + 1) * batch_size]
        hxy, hxx, hyy = _hsic_triplet(xs[sel], ys[sel])
        nums.append(hxy)
        dxs.append(hxx)
        dys.append(hyy)
    return _combine(math.fsum(nums) / k, math.fsum(dxs) / k, math.fsum(dys) / k)


# ---------------------------------------------------------------------------
# Layerwise profiles


@dataclass(frozen=True)
class CKAMatrix:
    """Grid of CKA values (layers x layers, or layers x 1 for profiles)."""

    values: np.ndarray
    taps: tuple[str, ...]
    probe_count: int
    batch_scheme: tuple[int, int] | None = None  # (k, batch_size), None = full

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("CKA values must form a 2D grid")
        if not np.isfinite(self.values).all():
            raise ValueError("CKA grid contains non-finite values")

    @property
    def profile(self) -> np.ndarray:
        if self.values.shape[1] != 1:
            raise ValueError("not a layerwise profile (more than one column)")
        return self.values[:, 0]

    def clamped(self) -> np.ndarray:
        """Reporting view with small negative estimates clamped to zero."""
        return np.clip(self.values, 0.0, 1.0)


def _load_encoder(checkpoint) -> tuple[Encoder, EncoderConfig]:
    from . import storage

    arrays, manifest = storage.load_checkpoint(checkpoint)
    cfg_doc = manifest["config"]
    cfg = EncoderConfig(
        depths=tuple(cfg_doc["depths"]),
        heads=tuple(cfg_doc["heads"]),
        embed_dim=cfg_doc["embed_dim"],
        input_shape=tuple(cfg_doc["input_shape"]),
        patch_size=tuple(cfg_doc["patch_size"]),
        window_size=tuple(cfg_doc["window_size"]),
        mlp_ratio=cfg_doc.get("mlp_ratio", 4.0),
    )
    model = Encoder(cfg)
    if any(name.startswith("encoder.") for name in arrays):
        load_parameters(model, extract_encoder_arrays(arrays))
    else:
        load_parameters(model, arrays)
    model.eval()
    return model, cfg


def collect_tap_features(model: Encoder, probes, chunk: int = 8) -> list[np.ndarray]:
    """Spatially mean-pooled features per tap, each (n_probes, channels)."""
    pooled = None
    with torch.no_grad():
        for start in range(0, len(probes), chunk):
            block = np.stack(probes[start:start + chunk]).astype(np.float32)
            x = torch.from_numpy(block)[:, None]
            _, taps = model(x, collect_taps=True)
            feats = [t[1].mean(dim=(1, 2, 3)).numpy() for t in taps]
            if pooled is None:
                pooled = [[] for _ in feats]
            for store, f in zip(pooled, feats):
                store.append(f)
    return [np.concatenate(chunks) for chunks in pooled]


def layerwise_cka(
    checkpoint_a,
    checkpoint_b,
    probes,
    layer_taps=None,
    batch_scheme: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
) -> CKAMatrix:
    """Layer-by-layer CKA profile between two checkpoints of one config.

    ``probes`` is a sequence of normalized volumes. ``layer_taps`` selects tap
    indices into [patch_embed, block0, block1, ...]; default is all taps.
    """
    model_a, cfg_a = _load_encoder(checkpoint_a)
    model_b, cfg_b = _load_encoder(checkpoint_b)
    if cfg_a != cfg_b:
        raise ValueError("checkpoints use different encoder configs")
    names = tap_names(cfg_a)
    if layer_taps is None:
        layer_taps = list(range(len(names)))
    for t in layer_taps:
        if not 0 <= t < len(names):
            raise ValueError(f"tap index {t} out of range for {len(names)} taps")

    feats_a = collect_tap_features(model_a, probes)
    feats_b = collect_tap_features(model_b, probes)
    values = np.zeros((len(layer_taps), 1))
    for row, t in enumerate(layer_taps):
        if batch_scheme is None:
            values[row, 0] = cka(feats_a[t], feats_b[t])
        else:
            k, bs = batch_scheme
            values[row, 0] = minibatch_cka(feats_a[t], feats_b[t], k, bs, rng=rng)
    return CKAMatrix(
        values=values,
        taps=tuple(names[t] for t in layer_taps),
        probe_count=len(probes),
        batch_scheme=batch_scheme,
    )


def write_cka_csv(path, matrix: CKAMatrix) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tap", "cka"])
        for name, value in zip(matrix.taps, matrix.values[:, 0]):
            writer.writerow([name, repr(float(value))])
