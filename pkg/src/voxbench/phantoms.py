"""Deterministic synthetic 3D "patients" in two imaging modalities.

Each phantom is a cube of scalar intensities plus an integer label map with
four ellipsoidal organs (one large, two medium, one small) and, for half the
seeds, a tumor blob embedded in the large organ. Modalities A and B share the
exact same geometry for a given seed and differ only in how class means are
mapped to intensities: A uses fixed means plus Gaussian noise, B applies a
gamma remap of the means and a smooth multiplicative bias field before adding
noise. Everything is a pure function of (seed, modality, shape).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import derive_rng

MODALITIES = ("A", "B")
SPLITS = ("pretrain", "train", "val", "test")

CLASS_NAMES = (
    "background",
    "large_organ",
    "medium_organ_1",
    "medium_organ_2",
    "small_organ",
    "tumor",
)

#: Structure grouping used for grouped accuracy reporting.
STRUCTURE_GROUPS = {
    "large": ("large_organ",),
    "medium": ("medium_organ_1", "medium_organ_2"),
    "small": ("small_organ",),
}

# Raw intensity scale is arbitrary units spanning [0, INTENSITY_SPAN].
INTENSITY_SPAN = 1000.0
NOISE_SIGMA = 0.05 * INTENSITY_SPAN
CLASS_MEANS = np.array([100.0, 400.0, 550.0, 700.0, 850.0, 250.0])
GAMMA_B = 0.6
BIAS_COMPONENTS = 3
BIAS_TOTAL_AMPLITUDE = 0.2
TUMOR_PROBABILITY = 0.5

DEFAULT_SHAPE = (32, 32, 32)
DEFAULT_SPACING = (1.5, 1.5, 2.0)

# Canonical organ layout as (center, semi-axes) in fractions of the extent.
_ORGAN_LAYOUT = (
    ((0.50, 0.44, 0.42), (0.26, 0.24, 0.22)),   # large
    ((0.30, 0.70, 0.64), (0.13, 0.12, 0.14)),   # medium 1
    ((0.70, 0.68, 0.62), (0.12, 0.14, 0.12)),   # medium 2
    ((0.52, 0.26, 0.76), (0.075, 0.065, 0.07)),  # small
)
_CENTER_JITTER = 0.10   # fraction of extent
_RADII_JITTER = 0.20    # relative


class DegenerateVolumeWarning(UserWarning):
    """Raised as a warning when normalization hits a constant-valued volume."""


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field with spacing metadata.

    Intensities are arbitrary units before normalization and lie in [0, 1]
    after. ``modality`` is fixed at creation (the dataclass is frozen).
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    modality: str
    id: str

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got ndim={self.voxels.ndim}")
        if min(self.voxels.shape) < 8:
            raise ValueError(f"volume shape {self.voxels.shape} has an axis < 8")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer labels aligned voxel-for-voxel with a Volume."""

    labels: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValueError(f"label map must be 3D, got ndim={self.labels.ndim}")
        if self.labels.max(initial=0) >= len(self.class_names):
            raise ValueError(
                f"label value {int(self.labels.max())} out of range for "
                f"{len(self.class_names)} classes"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform random 3D rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid_mask(shape, center_frac, radii_frac, rotation) -> np.ndarray:
    """Boolean mask of the rotated ellipsoid, coordinates in extent fractions."""
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    rel = grid - np.asarray(center_frac)
    local = rel @ rotation  # rows are points, so this applies R^T
    dist = (local / np.asarray(radii_frac)) ** 2
    return dist.sum(axis=-1) <= 1.0


def _draw_geometry(seed: int, shape) -> tuple[np.ndarray, bool]:
    """Label geometry shared by both modalities for one seed."""
    rng = derive_rng(seed, "geometry")
    labels = np.zeros(shape, dtype=np.uint8)
    for organ_class, (center, radii) in enumerate(_ORGAN_LAYOUT, start=1):
        center = np.asarray(center) + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, 3)
        radii = np.asarray(radii) * rng.uniform(1 - _RADII_JITTER, 1 + _RADII_JITTER, 3)
        rot = _rotation_matrix(rng)
        labels[_ellipsoid_mask(shape, center, radii, rot)] = organ_class

    has_tumor = bool(rng.random() < TUMOR_PROBABILITY)
    if has_tumor:
        large_center, large_radii = _ORGAN_LAYOUT[0]
        offset = rng.uniform(-0.3, 0.3, 3) * np.asarray(large_radii)
        t_center = np.asarray(large_center) + offset
        t_radii = np.asarray(large_radii) * rng.uniform(0.25, 0.45, 3)
        t_rot = _rotation_matrix(rng)
        blob = _ellipsoid_mask(shape, t_center, t_radii, t_rot)
        labels[blob & (labels == 1)] = 5  # embedded: only where the large organ is
    return labels, has_tumor


def _bias_field(shape, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative field: 1 plus a few low-frequency cosines."""
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    field_ = np.ones(shape)
    for _ in range(BIAS_COMPONENTS):
        freq = rng.uniform(0.3, 1.2, 3) * rng.choice([-1.0, 1.0], 3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.25, 1.0) * BIAS_TOTAL_AMPLITUDE / BIAS_COMPONENTS
        field_ += amp * np.cos(2 * np.pi * (grid @ freq) + phase)
    return field_


def generate_phantom(
    seed: int,
    modality: str,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
) -> tuple[Volume, LabelMap]:
    """Generate one synthetic patient.

    Deterministic in (seed, modality, shape). The label map depends only on
    (seed, shape), so modality pairs share geometry exactly.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"phantom shape must be 3 axes of at least 16 voxels, got {shape}")
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}, expected one of {MODALITIES}")

    labels, _ = _draw_geometry(seed, shape)
    rng = derive_rng(seed, "intensity", modality)

    if modality == "A":
        means = CLASS_MEANS
        voxels = means[labels] + rng.normal(0.0, NOISE_SIGMA, shape)
    else:
        means = (CLASS_MEANS / INTENSITY_SPAN) ** GAMMA_B * INTENSITY_SPAN
        voxels = means[labels] * _bias_field(shape, rng)
        voxels += rng.normal(0.0, NOISE_SIGMA, shape)

    vol = Volume(
        voxels=voxels.astype(np.float32),
        spacing=tuple(float(s) for s in spacing),
        modality=modality,
        id=f"{modality}{seed:05d}",
    )
    return vol, LabelMap(labels=labels)


def normalize_intensity(v: Volume, window: tuple[float, float]) -> Volume:
    """Clamp to [low, high] then map affinely so low -> 0 and high -> 1."""
    low, high = float(window[0]), float(window[1])
    if not low < high:
        raise ValueError(f"window must satisfy low < high, got ({low}, {high})")
    out = (np.clip(v.voxels, low, high) - low) / (high - low)
    return replace(v, voxels=out.astype(v.voxels.dtype))


def normalize_percentile(v: Volume, p_low: float, p_high: float) -> Volume:
    """Window at the given intensity percentiles, then normalize to [0, 1]."""
    if not 0 <= p_low < p_high <= 100:
        raise ValueError(f"need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})")
    low, high = np.percentile(v.voxels, [p_low, p_high])
    if low == high:
        warnings.warn(
            f"volume {v.id}: percentiles ({p_low}, {p_high}) coincide at {low}; "
            "output set to constant 0.5",
            DegenerateVolumeWarning,
        )
        return replace(v, voxels=np.full(v.shape, 0.5, dtype=v.voxels.dtype))
    return normalize_intensity(v, (low, high))


def relabel_for_task(labels: LabelMap, task: str) -> LabelMap:
    """Recast the raw 6-class labels for a segmentation task.

    ``organs``: tumor voxels rejoin the large organ that hosts them, giving
    background + 4 organ classes. ``tumor``: binary tumor-vs-rest.
    """
    if task == "organs":
        out = labels.labels.copy()
        out[out == 5] = 1
        return LabelMap(labels=out, class_names=CLASS_NAMES[:5])
    if task == "tumor":
        out = (labels.labels == 5).astype(np.uint8)
        return LabelMap(labels=out, class_names=("background", "tumor"))
    raise ValueError(f"unknown task {task!r}, expected 'organs' or 'tumor'")
