"""The nine self-supervised pretext objectives and their shared machinery.

Masked image modeling (simmim), inpainting, plain reconstruction, InfoNCE
contrastive learning, rotation prediction, self-distillation (dino), masked
co-distillation (ibot), masked-image + token/global distillation (smit), and
the rotation+inpainting+contrastive multi-task (swinunetr_multi). Each loss is
a pure function of model outputs; teacher updates (EMA, centering) are the
explicit state-update rules applied after each optimizer step.

Distillation conventions: the student always processes masked or augmented
views, the teacher sees the clean views and never receives gradients. Teacher
logits are centered with a running mean and sharpened with a lower softmax
temperature; the teacher temperature warms up linearly over the first epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Encoder, EncoderConfig, init_parameters, pooled_embedding_torch

METHODS = (
    "simmim",
    "inpaint",
    "recon",
    "contrastive",
    "rotation",
    "dino",
    "ibot",
    "smit",
    "swinunetr_multi",
)

#: Methods that maintain an EMA teacher and distillation center.
DISTILL_METHODS = ("dino", "ibot", "smit")


# ---------------------------------------------------------------------------
# Masking


@dataclass(frozen=True)
class MaskSpec:
    """The set of masked stage-0 token indices over a token grid."""

    masked_indices: np.ndarray  # (M, 3) integer coordinates
    ratio: float
    grid_shape: tuple[int, int, int]

    def __post_init__(self):
        n = int(np.prod(self.grid_shape))
        want = int(math.floor(self.ratio * n))
        if len(self.masked_indices) != want:
            raise ValueError(
                f"mask has {len(self.masked_indices)} indices, expected "
                f"floor({self.ratio} * {n}) = {want}"
            )
        flat = np.ravel_multi_index(self.masked_indices.T, self.grid_shape)
        if len(np.unique(flat)) != len(flat):
            raise ValueError("mask indices are not unique")

    @property
    def count(self) -> int:
        return len(self.masked_indices)

    def bool_grid(self) -> np.ndarray:
        grid = np.zeros(self.grid_shape, dtype=bool)
        grid[tuple(self.masked_indices.T)] = True
        return grid

    def voxel_mask(self, patch_size) -> np.ndarray:
        """Expand the token mask to voxel resolution."""
        grid = self.bool_grid()
        for ax, p in enumerate(patch_size):
            grid = grid.repeat(p, axis=ax)
        return grid


def sample_mask(grid_shape, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniformly sample floor(ratio * n) token indices without replacement."""
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    n = int(np.prod(grid_shape))
    m = int(math.floor(ratio * n))
    if m == 0:
        raise ValueError(
            f"degenerate mask: floor({ratio} * {n}) = 0 tokens would be masked"
        )
    flat = rng.choice(n, size=m, replace=False)
    coords = np.stack(np.unravel_index(np.sort(flat), grid_shape), axis=1)
    return MaskSpec(masked_indices=coords, ratio=ratio, grid_shape=tuple(grid_shape))


# ---------------------------------------------------------------------------
# Configuration and teacher-student state


@dataclass(frozen=True)
class DistillConfig:
    # center momentum is higher than the large-batch convention because tiny
    # batches make the raw batch mean too noisy a centering target
    tau_s: float = 0.1
    tau_t_schedule: tuple[float, float, int] = (0.04, 0.07, 30)
    center_momentum: float = 0.99
    ema_momentum: float = 0.99
    head_output_dim: int = 256

    def __post_init__(self):
        if self.tau_s <= 0 or min(self.tau_t_schedule[:2]) <= 0:
            raise ValueError("softmax temperatures must be positive")
        if not 0 <= self.center_momentum < 1:
            raise ValueError("center momentum must lie in [0, 1)")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("EMA momentum must lie in [0, 1]")


def tau_t_at(schedule: tuple[float, float, int], epoch: float) -> float:
    """Linear warmup from start to end over the first ``warmup`` epochs."""
    start, end, warmup = schedule
    if epoch >= warmup:
        return end
    return start + (end - start) * epoch / warmup


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters for one pretext objective; only relevant fields are read."""

    method: str
    mask_ratio: float = 0.75
    temperature: float = 0.1          # InfoNCE
    lambda_g: float = 1.0             # ibot global weight
    lambda_p: float = 1.0             # ibot patch weight
    lambda_mpd: float = 0.1           # smit masked patch distillation weight
    lambda_itd: float = 0.1           # smit global token distillation weight
    rotation_classes: int = 4
    w_rot: float = 1.0                # swinunetr_multi part weights
    w_inpaint: float = 1.0
    w_contrast: float = 1.0
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pretext method {self.method!r}, have {METHODS}")

    @property
    def needs_teacher(self) -> bool:
        return self.method in DISTILL_METHODS

    @property
    def needs_mask(self) -> bool:
        return self.method in ("simmim", "inpaint", "ibot", "smit", "swinunetr_multi")

    @property
    def needs_views(self) -> bool:
        return self.method in ("contrastive", "dino", "ibot", "smit", "swinunetr_multi")


@dataclass
class TeacherStudentState:
    """Student parameters, EMA teacher, distillation center, epoch counter.

    For methods without distillation the teacher and center stay ``None``.
    ``rng_state`` records the data stream state at the end of a training run.
    """

    student: nn.Module
    teacher: nn.Module | None
    center: torch.Tensor | None
    epoch: int = 0
    rng_state: dict | None = None


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class ViewPair:
    """Two augmented crops of the same source volume with replayable provenance."""

    view1: np.ndarray
    view2: np.ndarray
    provenance: tuple[dict, dict]


def _augment_once(voxels: np.ndarray, out_shape, rng: np.random.Generator):
    offsets = tuple(
        int(rng.integers(0, n - o + 1)) for n, o in zip(voxels.shape, out_shape)
    )
    crop = voxels[tuple(slice(off, off + o) for off, o in zip(offsets, out_shape))]
    flips = tuple(bool(rng.random() < 0.5) for _ in range(3))
    for ax, f in enumerate(flips):
        if f:
            crop = np.flip(crop, axis=ax)
    scale = float(rng.uniform(0.9, 1.1))
    shift = float(rng.uniform(-0.05, 0.05))
    crop = crop * scale + shift
    record = {"offsets": offsets, "flips": flips, "scale": scale, "shift": shift}
    return np.ascontiguousarray(crop, dtype=np.float32), record


def make_view_pair(voxels: np.ndarray, out_shape, rng: np.random.Generator) -> ViewPair:
    if any(n < o for n, o in zip(voxels.shape, out_shape)):
        raise ValueError(f"volume {voxels.shape} smaller than view shape {tuple(out_shape)}")
    v1, r1 = _augment_once(voxels, out_shape, rng)
    v2, r2 = _augment_once(voxels, out_shape, rng)
    return ViewPair(view1=v1, view2=v2, provenance=(r1, r2))


def apply_rotation(voxels, class_id: int, classes: int = 4):
    """Lossless 90-degree-multiple rotation in the axial plane (about axis 0)."""
    if not 0 <= class_id < classes:
        raise ValueError(f"rotation class {class_id} out of range for {classes} classes")
    if isinstance(voxels, torch.Tensor):
        return torch.rot90(voxels, k=class_id, dims=(-2, -1))
    return np.ascontiguousarray(np.rot90(voxels, k=class_id, axes=(-2, -1)))


# ---------------------------------------------------------------------------
# Pure losses


def loss_simmim(pred: torch.Tensor, target: torch.Tensor, masks, patch_size) -> torch.Tensor:
    """Mean squared error over voxels under masked patches only.

    ``masks`` is one MaskSpec (applied to every batch item) or a list with one
    spec per item; ``pred``/``target`` are (B, Z, Y, X) or unbatched.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    if pred.dim() == 3:
        pred, target = pred[None], target[None]
    specs = masks if isinstance(masks, (list, tuple)) else [masks] * pred.shape[0]
    if len(specs) != pred.shape[0]:
        raise ValueError(f"{len(specs)} masks for batch of {pred.shape[0]}")
    if any(s.count == 0 for s in specs):
        raise ValueError("empty mask")
    vox = np.stack([s.voxel_mask(patch_size) for s in specs])
    m = torch.from_numpy(vox).to(pred.device)
    diff = (pred - target)[m]
    return (diff**2).mean()


def loss_inpaint(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all voxels (input was masked upstream)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def loss_recon(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all voxels (input was the clean volume)."""
    return loss_inpaint(pred, target)


def loss_infonce(embeddings: torch.Tensor, pairing, t: float) -> torch.Tensor:
    """InfoNCE over 2N anchor rows, each with exactly one positive partner.

    Rows are L2-normalized internally; similarities are cosine / t. The
    anchor itself is excluded from the denominator.
    """
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    n2 = embeddings.shape[0]
    if n2 < 2 or n2 % 2 != 0:
        raise ValueError(f"need 2N >= 2 embeddings, got {n2}")
    pairing = torch.as_tensor(np.asarray(pairing), dtype=torch.long)
    if pairing.shape != (n2,) or torch.any(pairing == torch.arange(n2)):
        raise ValueError("pairing must map each row to a distinct partner row")
    z = F.normalize(embeddings, dim=1)
    sim = (z @ z.T) / t
    sim = sim.masked_fill(torch.eye(n2, dtype=torch.bool, device=sim.device), float("-inf"))
    pos = sim[torch.arange(n2), pairing]
    return (torch.logsumexp(sim, dim=1) - pos).mean()


def infonce_pairing(n: int) -> np.ndarray:
    """Standard two-view pairing: row i of view 1 partners row i of view 2."""
    return np.concatenate([np.arange(n) + n, np.arange(n)])


def loss_rotation(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean multi-category cross-entropy after softmax."""
    if torch.any(labels < 0) or torch.any(labels >= logits.shape[1]):
        raise ValueError(
            f"rotation label out of range for {logits.shape[1]} classes"
        )
    return F.cross_entropy(logits, labels)


def distill_ce(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    center: torch.Tensor,
    tau_t: float = 0.07,
    tau_s: float = 0.1,
) -> torch.Tensor:
    """Cross-entropy from the centered, sharpened teacher to the student.

    P_t = softmax((teacher - center) / tau_t) with gradients blocked through
    the teacher; P_s = softmax(student / tau_s).
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"teacher rows {tuple(teacher_logits.shape)} != student rows "
            f"{tuple(student_logits.shape)}"
        )
    if center.shape[-1] != teacher_logits.shape[-1]:
        raise ValueError(
            f"center length {center.shape[-1]} != logit width {teacher_logits.shape[-1]}"
        )
    pt = F.softmax((teacher_logits.detach() - center) / tau_t, dim=-1)
    log_ps = F.log_softmax(student_logits / tau_s, dim=-1)
    return -(pt * log_ps).sum(dim=-1).mean()


def ema_update(state: TeacherStudentState, m: float) -> TeacherStudentState:
    """teacher <- m * teacher + (1 - m) * student, elementwise, every layer.

    m = 0 copies the student exactly and m = 1 leaves the teacher untouched.
    """
    if not 0 <= m <= 1:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m}")
    if state.teacher is None:
        raise ValueError("state has no teacher network")
    if m == 1:
        return state
    s_params = dict(state.student.named_parameters())
    with torch.no_grad():
        for name, t_param in state.teacher.named_parameters():
            s_param = s_params.get(name)
            if s_param is None or s_param.shape != t_param.shape:
                raise ValueError(f"teacher/student shape mismatch at {name!r}")
            if m == 0:
                t_param.copy_(s_param.detach())
            else:
                t_param.mul_(m).add_(s_param.detach(), alpha=1 - m)
    return state


def update_center(center: torch.Tensor, teacher_batch_logits: torch.Tensor,
                  momentum: float) -> torch.Tensor:
    """center <- momentum * center + (1 - momentum) * batch mean of teacher logits."""
    if not 0 <= momentum < 1:
        raise ValueError(f"center momentum must lie in [0, 1), got {momentum}")
    if teacher_batch_logits.numel() == 0 or teacher_batch_logits.shape[0] == 0:
        raise ValueError("empty teacher batch")
    batch_mean = teacher_batch_logits.detach().reshape(-1, center.shape[-1]).mean(dim=0)
    return momentum * center + (1 - momentum) * batch_mean


# ---------------------------------------------------------------------------
# Heads and per-method models


class ProjectionHead(nn.Module):
    """3-layer MLP with an L2-normalized bottleneck, as used by the
    distillation and contrastive objectives."""

    def __init__(self, in_dim: int, out_dim: int = 256, bottleneck: int = 64):
        super().__init__()
        hidden = 4 * in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, bottleneck)
        self.out = nn.Linear(bottleneck, out_dim, bias=False)

    def forward(self, x):
        x = F.gelu(self.fc1(x))
        x = F.normalize(self.fc2(x), dim=-1)
        return self.out(x)


class VoxelDecoder(nn.Module):
    """Lightweight transposed-convolution stack from last-stage features back
    to a single-channel volume at input resolution."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        in_ch = cfg.stage_width(3)
        factor = cfg.patch_size[0] * 8
        n_up = int(round(math.log2(factor)))
        layers = []
        ch = in_ch
        for _ in range(n_up):
            nxt = max(8, ch // 2)
            layers += [nn.ConvTranspose3d(ch, nxt, kernel_size=2, stride=2), nn.GELU()]
            ch = nxt
        self.up = nn.Sequential(*layers)
        self.head = nn.Conv3d(ch, 1, kernel_size=1)

    def forward(self, last_stage):
        # last_stage: (B, z, y, x, C) channel-last
        x = last_stage.permute(0, 4, 1, 2, 3)
        return self.head(self.up(x)).squeeze(1)


class TokenPixelHead(nn.Module):
    """Per-token linear regression of the voxels under each stage-0 patch."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(cfg.embed_dim, int(np.prod(cfg.patch_size)))

    def forward(self, tokens):
        # tokens: (B, z, y, x, C) -> (B, Z, Y, X)
        b, gz, gy, gx, _ = tokens.shape
        pz, py, px = self.patch_size
        out = self.proj(tokens).view(b, gz, gy, gx, pz, py, px)
        out = out.permute(0, 1, 4, 2, 5, 3, 6)
        return out.reshape(b, gz * pz, gy * py, gx * px)


class PretextModel(nn.Module):
    """Encoder plus exactly the heads one pretext objective needs."""

    def __init__(self, method_cfg: MethodConfig, enc_cfg: EncoderConfig):
        super().__init__()
        self.method = method_cfg.method
        self.encoder = Encoder(enc_cfg)
        k = method_cfg.distill.head_output_dim
        last = enc_cfg.stage_width(3)
        m = method_cfg.method
        if m in ("contrastive", "dino", "ibot", "smit", "swinunetr_multi"):
            self.global_head = ProjectionHead(last, k)
        if m in ("ibot", "smit"):
            self.token_head = ProjectionHead(enc_cfg.embed_dim, k)
        if m in ("simmim", "inpaint", "recon", "swinunetr_multi"):
            self.pixel_decoder = VoxelDecoder(enc_cfg)
        if m == "smit":
            self.pixel_head = TokenPixelHead(enc_cfg)
        if m in ("rotation", "swinunetr_multi"):
            self.rotation_head = nn.Linear(last, method_cfg.rotation_classes)

    def features(self, x, mask=None):
        return self.encoder(x, mask=mask)

    def pooled_logits(self, feats):
        return self.global_head(pooled_embedding_torch(feats))

    def token_logits(self, feats):
        return self.token_head(feats[0])


def build_pretext_model(method_cfg: MethodConfig, enc_cfg: EncoderConfig,
                        rng: np.random.Generator) -> PretextModel:
    model = PretextModel(method_cfg, enc_cfg)
    init_parameters(model, rng)
    return model


def init_state(method_cfg: MethodConfig, enc_cfg: EncoderConfig,
               rng: np.random.Generator) -> TeacherStudentState:
    """Fresh student (and EMA teacher clone for distillation methods)."""
    student = build_pretext_model(method_cfg, enc_cfg, rng)
    teacher = None
    center = None
    if method_cfg.needs_teacher:
        teacher = PretextModel(method_cfg, enc_cfg)
        teacher.load_state_dict(student.state_dict())
        for p in teacher.parameters():
            p.requires_grad_(False)
        center = torch.zeros(method_cfg.distill.head_output_dim)
    return TeacherStudentState(student=student, teacher=teacher, center=center)


# ---------------------------------------------------------------------------
# Batch assembly


@dataclass
class PretextBatch:
    """Inputs for one optimizer step, composed per method."""

    batch_id: str
    volumes: torch.Tensor | None = None   # (B, Z, Y, X) augmented crops
    views: tuple[torch.Tensor, torch.Tensor] | None = None
    masks: list[MaskSpec] | None = None
    rot_volumes: torch.Tensor | None = None
    rot_labels: torch.Tensor | None = None


def make_batch(
    method_cfg: MethodConfig,
    enc_cfg: EncoderConfig,
    volumes: list[np.ndarray],
    rng: np.random.Generator,
    batch_id: str = "",
) -> PretextBatch:
    out_shape = enc_cfg.input_shape
    grid0 = enc_cfg.stage_grid(0)
    batch = PretextBatch(batch_id=batch_id)

    if method_cfg.method in ("simmim", "inpaint", "recon", "swinunetr_multi"):
        crops = [_augment_once(v, out_shape, rng)[0] for v in volumes]
        batch.volumes = torch.from_numpy(np.stack(crops))
    if method_cfg.needs_views:
        pairs = [make_view_pair(v, out_shape, rng) for v in volumes]
        batch.views = (
            torch.from_numpy(np.stack([p.view1 for p in pairs])),
            torch.from_numpy(np.stack([p.view2 for p in pairs])),
        )
    if method_cfg.needs_mask:
        batch.masks = [sample_mask(grid0, method_cfg.mask_ratio, rng) for _ in volumes]
    if method_cfg.method in ("rotation", "swinunetr_multi"):
        labels = rng.integers(0, method_cfg.rotation_classes, size=len(volumes))
        rots = [
            apply_rotation(_augment_once(v, out_shape, rng)[0], int(c),
                           method_cfg.rotation_classes)
            for v, c in zip(volumes, labels)
        ]
        batch.rot_volumes = torch.from_numpy(np.stack(rots))
        batch.rot_labels = torch.from_numpy(labels.astype(np.int64))
    return batch


# ---------------------------------------------------------------------------
# Composite objectives


def _mask_grids(masks: list[MaskSpec]) -> np.ndarray:
    return np.stack([m.bool_grid() for m in masks])


def _masked_token_rows(token_logits: torch.Tensor, grids: np.ndarray) -> torch.Tensor:
    sel = torch.from_numpy(grids).to(token_logits.device)
    return token_logits[sel]


def loss_dino(views, state: TeacherStudentState, cfg: MethodConfig, epoch: float = 0.0):
    """Symmetric cross-view distillation on pooled projection-head outputs."""
    v1, v2 = (v.unsqueeze(1) for v in views)
    tau_t = tau_t_at(cfg.distill.tau_t_schedule, epoch)
    tau_s = cfg.distill.tau_s
    with torch.no_grad():
        t1 = state.teacher.pooled_logits(state.teacher.features(v1))
        t2 = state.teacher.pooled_logits(state.teacher.features(v2))
    s1 = state.student.pooled_logits(state.student.features(v1))
    s2 = state.student.pooled_logits(state.student.features(v2))
    total = 0.5 * (
        distill_ce(t2, s1, state.center, tau_t, tau_s)
        + distill_ce(t1, s2, state.center, tau_t, tau_s)
    )
    return total, {"global": total}, torch.cat([t1, t2])


def loss_ibot(views, masks, state: TeacherStudentState, cfg: MethodConfig,
              epoch: float = 0.0):
    """Masked co-distillation: cross-view global term plus in-view masked
    patch-token term; the student sees masked views, the teacher clean ones."""
    if not masks or any(m.count == 0 for m in masks):
        raise ValueError("empty mask")
    v1, v2 = (v.unsqueeze(1) for v in views)
    grids = _mask_grids(masks)
    tau_t = tau_t_at(cfg.distill.tau_t_schedule, epoch)
    tau_s = cfg.distill.tau_s
    with torch.no_grad():
        ft1 = state.teacher.features(v1)
        ft2 = state.teacher.features(v2)
        t_pool1, t_pool2 = (state.teacher.pooled_logits(f) for f in (ft1, ft2))
        t_tok1, t_tok2 = (state.teacher.token_logits(f) for f in (ft1, ft2))
    fs1 = state.student.features(v1, mask=grids)
    fs2 = state.student.features(v2, mask=grids)
    s_pool1, s_pool2 = (state.student.pooled_logits(f) for f in (fs1, fs2))
    s_tok1, s_tok2 = (state.student.token_logits(f) for f in (fs1, fs2))

    global_part = 0.5 * (
        distill_ce(t_pool2, s_pool1, state.center, tau_t, tau_s)
        + distill_ce(t_pool1, s_pool2, state.center, tau_t, tau_s)
    )
    patch_part = 0.5 * (
        distill_ce(_masked_token_rows(t_tok1, grids),
                   _masked_token_rows(s_tok1, grids), state.center, tau_t, tau_s)
        + distill_ce(_masked_token_rows(t_tok2, grids),
                     _masked_token_rows(s_tok2, grids), state.center, tau_t, tau_s)
    )
    total = cfg.lambda_g * global_part + cfg.lambda_p * patch_part
    parts = {"global": global_part, "patch": patch_part}
    teacher_rows = torch.cat([
        t_pool1, t_pool2,
        _masked_token_rows(t_tok1, grids), _masked_token_rows(t_tok2, grids),
    ])
    return total, parts, teacher_rows


def loss_smit(views, masks, state: TeacherStudentState, cfg: MethodConfig,
              epoch: float = 0.0):
    """Masked image prediction + masked patch distillation + global token
    distillation, weighted mip + lambda_mpd * mpd + lambda_itd * gtd."""
    if not masks or any(m.count == 0 for m in masks):
        raise ValueError("empty mask")
    v1, v2 = (v.unsqueeze(1) for v in views)
    grids = _mask_grids(masks)
    enc_cfg = state.student.encoder.cfg
    tau_t = tau_t_at(cfg.distill.tau_t_schedule, epoch)
    tau_s = cfg.distill.tau_s
    with torch.no_grad():
        ft1 = state.teacher.features(v1)
        ft2 = state.teacher.features(v2)
        t_tok = state.teacher.token_logits(ft1)
        t_pool = state.teacher.pooled_logits(ft2)
    fs1 = state.student.features(v1, mask=grids)
    mip_pred = state.student.pixel_head(fs1[0])
    s_tok = state.student.token_logits(fs1)
    s_pool = state.student.pooled_logits(fs1)

    mip = loss_simmim(mip_pred, views[0], masks, enc_cfg.patch_size)
    mpd = distill_ce(_masked_token_rows(t_tok, grids),
                     _masked_token_rows(s_tok, grids), state.center, tau_t, tau_s)
    gtd = distill_ce(t_pool, s_pool, state.center, tau_t, tau_s)
    total = mip + cfg.lambda_mpd * mpd + cfg.lambda_itd * gtd
    parts = {"mip": mip, "mpd": mpd, "gtd": gtd}
    teacher_rows = torch.cat([t_pool, _masked_token_rows(t_tok, grids)])
    return total, parts, teacher_rows


def loss_swinunetr_multi(views, masks, rotation_batch, volumes,
                         state: TeacherStudentState, cfg: MethodConfig):
    """Rotation prediction + masked inpainting + contrastive, weighted sum."""
    student = state.student
    rot_vols, rot_labels = rotation_batch
    rot_logits = student.rotation_head(
        pooled_embedding_torch(student.features(rot_vols.unsqueeze(1)))
    )
    rot = loss_rotation(rot_logits, rot_labels)

    grids = _mask_grids(masks)
    feats = student.features(volumes.unsqueeze(1), mask=grids)
    inp = loss_inpaint(student.pixel_decoder(feats[-1]), volumes)

    v1, v2 = (v.unsqueeze(1) for v in views)
    z1 = student.pooled_logits(student.features(v1))
    z2 = student.pooled_logits(student.features(v2))
    con = loss_infonce(torch.cat([z1, z2]), infonce_pairing(z1.shape[0]),
                       cfg.temperature)
    total = cfg.w_rot * rot + cfg.w_inpaint * inp + cfg.w_contrast * con
    return total, {"rot": rot, "inpaint": inp, "contrast": con}, None


def method_loss(method_cfg: MethodConfig, state: TeacherStudentState,
                batch: PretextBatch, epoch: float = 0.0):
    """Dispatch to the objective named by ``method_cfg.method``.

    Returns (total, named parts, teacher logit rows for the center update).
    """
    student = state.student
    m = method_cfg.method
    if m == "simmim":
        grids = _mask_grids(batch.masks)
        feats = student.features(batch.volumes.unsqueeze(1), mask=grids)
        pred = student.pixel_decoder(feats[-1])
        total = loss_simmim(pred, batch.volumes, batch.masks,
                            student.encoder.cfg.patch_size)
        return total, {"mim": total}, None
    if m == "inpaint":
        grids = _mask_grids(batch.masks)
        feats = student.features(batch.volumes.unsqueeze(1), mask=grids)
        total = loss_inpaint(student.pixel_decoder(feats[-1]), batch.volumes)
        return total, {"inpaint": total}, None
    if m == "recon":
        feats = student.features(batch.volumes.unsqueeze(1))
        total = loss_recon(student.pixel_decoder(feats[-1]), batch.volumes)
        return total, {"recon": total}, None
    if m == "contrastive":
        v1, v2 = (v.unsqueeze(1) for v in batch.views)
        z1 = student.pooled_logits(student.features(v1))
        z2 = student.pooled_logits(student.features(v2))
        total = loss_infonce(torch.cat([z1, z2]), infonce_pairing(z1.shape[0]),
                             method_cfg.temperature)
        return total, {"contrast": total}, None
    if m == "rotation":
        logits = student.rotation_head(
            pooled_embedding_torch(student.features(batch.rot_volumes.unsqueeze(1)))
        )
        total = loss_rotation(logits, batch.rot_labels)
        return total, {"rot": total}, None
    if m == "dino":
        return loss_dino(batch.views, state, method_cfg, epoch)
    if m == "ibot":
        return loss_ibot(batch.views, batch.masks, state, method_cfg, epoch)
    if m == "smit":
        return loss_smit(batch.views, batch.masks, state, method_cfg, epoch)
    if m == "swinunetr_multi":
        return loss_swinunetr_multi(
            batch.views, batch.masks, (batch.rot_volumes, batch.rot_labels),
            batch.volumes, state, method_cfg,
        )
    raise ValueError(f"unknown pretext method {m!r}")


# ---------------------------------------------------------------------------
# Optimizer step and pretraining loop


@dataclass(frozen=True)
class LossReport:
    step: int
    method: str
    total: float
    parts: dict
    lr: float
    tau_t: float | None


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_steps: int = 0) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1 + math.cos(math.pi * min(1.0, progress)))


def pretrain_step(
    method_cfg: MethodConfig,
    batch: PretextBatch,
    state: TeacherStudentState,
    optimizer: torch.optim.Optimizer,
    *,
    step: int = 0,
    lr: float | None = None,
) -> LossReport:
    """One optimizer step on the student; EMA teacher and center updates after.

    Aborts on a non-finite loss with the batch id and part values.
    """
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    total, parts, teacher_rows = method_loss(method_cfg, state, batch, state.epoch)
    part_values = {k: float(v.detach()) for k, v in parts.items()}
    if not math.isfinite(float(total.detach())):
        raise RuntimeError(
            f"non-finite loss in batch {batch.batch_id!r} at step {step}: "
            f"total={float(total.detach())}, parts={part_values}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    tau_t = None
    if method_cfg.needs_teacher:
        ema_update(state, method_cfg.distill.ema_momentum)
        state.center = update_center(
            state.center, teacher_rows, method_cfg.distill.center_momentum
        )
        tau_t = tau_t_at(method_cfg.distill.tau_t_schedule, state.epoch)
    return LossReport(
        step=step,
        method=method_cfg.method,
        total=float(total.detach()),
        parts=part_values,
        lr=float(optimizer.param_groups[0]["lr"]),
        tau_t=tau_t,
    )


def run_pretraining(
    method_cfg: MethodConfig,
    enc_cfg: EncoderConfig,
    volumes: list[np.ndarray],
    *,
    steps: int,
    seed: int = 0,
    batch_size: int = 4,
    base_lr: float = 1e-3,
    warmup_steps: int = 30,
    steps_per_epoch: int | None = None,
) -> tuple[TeacherStudentState, list[LossReport]]:
    """Pretrain one method from scratch on a list of normalized volumes."""
    from .seeding import derive_rng

    if not volumes:
        raise ValueError("no pretraining volumes")
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(volumes) // batch_size)
    init_rng = derive_rng(seed, "init", method_cfg.method)
    data_rng = derive_rng(seed, "batches", method_cfg.method)
    state = init_state(method_cfg, enc_cfg, init_rng)
    optimizer = torch.optim.AdamW(state.student.parameters(), lr=base_lr)
    reports = []
    for step in range(steps):
        state.epoch = step // steps_per_epoch
        idx = data_rng.choice(len(volumes), size=min(batch_size, len(volumes)),
                              replace=len(volumes) < batch_size)
        batch = make_batch(
            method_cfg, enc_cfg, [volumes[i] for i in idx], data_rng,
            batch_id=f"{method_cfg.method}/step{step}",
        )
        lr = cosine_lr(step, steps, base_lr, warmup_steps)
        reports.append(pretrain_step(
            method_cfg, batch, state, optimizer, step=step, lr=lr,
        ))
    state.rng_state = data_rng.bit_generator.state
    return state, reports


def write_loss_log(path, reports: list[LossReport]) -> None:
    """Append-style CSV of per-step losses: step, total, parts, lr, tau_t."""
    import csv

    part_names = sorted({k for r in reports for k in r.parts})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "method", "total", *part_names, "lr", "tau_t"])
        for r in reports:
            writer.writerow([
                r.step, r.method, repr(r.total),
                *[repr(r.parts.get(k, "")) for k in part_names],
                repr(r.lr), "" if r.tau_t is None else repr(r.tau_t),
            ])
