"""Hierarchical 3D windowed-attention encoder.

The shared backbone for every pretext objective and every segmentor: patch
embedding followed by four stages of window attention blocks, patch-merging
downsampling between stages (spatial extent halves, channels double). Blocks
within a stage alternate unshifted and shifted window partitions, with a
learned relative position bias per window. A learned mask embedding can
replace any subset of stage-0 tokens, which makes the output exactly
independent of the voxels underneath masked patches.

Everything is deterministic: parameters are initialized from a caller-supplied
numpy Generator and the forward pass contains no dropout or other sampling.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    heads: tuple[int, int, int, int] = (2, 2, 4, 4)
    embed_dim: int = 24
    input_shape: tuple[int, int, int] = (32, 32, 32)
    patch_size: tuple[int, int, int] = (2, 2, 2)
    window_size: tuple[int, int, int] = (4, 4, 4)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.depths) != N_STAGES or len(self.heads) != N_STAGES:
            raise ValueError("depths and heads must list exactly 4 stages")
        if any(d < 1 for d in self.depths) or any(h < 1 for h in self.heads):
            raise ValueError("depths and heads must be positive")
        for axis, (n, p) in enumerate(zip(self.input_shape, self.patch_size)):
            if n % p != 0:
                raise ValueError(
                    f"input axis {axis} (size {n}) is not divisible by patch size {p}"
                )
        for stage in range(N_STAGES):
            width = self.stage_width(stage)
            if width % self.heads[stage] != 0:
                raise ValueError(
                    f"stage {stage}: {self.heads[stage]} heads do not divide width {width}"
                )

    def stage_width(self, stage: int) -> int:
        return self.embed_dim * 2**stage

    def stage_grid(self, stage: int) -> tuple[int, int, int]:
        return tuple(
            n // p // 2**stage for n, p in zip(self.input_shape, self.patch_size)
        )

    def stage_window(self, stage: int) -> tuple[int, int, int]:
        """Window clamped to the stage grid when the grid is smaller."""
        return tuple(min(w, g) for w, g in zip(self.window_size, self.stage_grid(stage)))


PRESETS = {
    "desk": EncoderConfig(),
    "paper-base": EncoderConfig(
        depths=(2, 2, 8, 2), heads=(4, 4, 8, 16), embed_dim=48, input_shape=(96, 96, 96)
    ),
    "smit-s": EncoderConfig(
        depths=(2, 2, 18, 2), heads=(4, 8, 16, 32), embed_dim=96, input_shape=(96, 96, 96)
    ),
    "smit-p": EncoderConfig(
        depths=(2, 2, 40, 4), heads=(4, 8, 16, 32), embed_dim=128,
        input_shape=(128, 128, 128),
    ),
}


def get_preset(name: str) -> EncoderConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown encoder preset {name!r}, have {sorted(PRESETS)}")
    return PRESETS[name]


def config_hash(cfg: EncoderConfig) -> str:
    doc = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TokenGrid:
    """Per-stage feature map: three spatial axes times channels."""

    tokens: np.ndarray
    stage: int

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ValueError(f"token grid must be 4D, got ndim={self.tokens.ndim}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.tokens.shape[:3]

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]


def window_partition(x: torch.Tensor, window: tuple[int, int, int]) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * n_windows, prod(window), C)."""
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    x = x.view(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, wd * wh * ww, c)


def window_reverse(windows, window, dims):
    d, h, w = dims
    wd, wh, ww = window
    b = windows.shape[0] // ((d // wd) * (h // wh) * (w // ww))
    x = windows.view(b, d // wd, h // wh, w // ww, wd, wh, ww, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(b, d, h, w, -1)


def _relative_position_index(window) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(
        *[torch.arange(w) for w in window], indexing="ij"
    )).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    for ax in range(3):
        rel[:, :, ax] += window[ax] - 1
    rel[:, :, 0] *= (2 * window[1] - 1) * (2 * window[2] - 1)
    rel[:, :, 1] *= 2 * window[2] - 1
    return rel.sum(-1)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.scale = (dim // heads) ** -0.5
        n_rel = int(np.prod([2 * w - 1 for w in window]))
        self.rel_bias_table = nn.Parameter(torch.zeros(n_rel, heads))
        self.register_buffer("rel_index", _relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, attn_mask=None):
        # x: (B_windows, N, C)
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias_table[self.rel_index.view(-1)].view(n, n, self.heads)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if attn_mask is not None:
            nw = attn_mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + attn_mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def _shift_attn_mask(grid, window, shift, device):
    """Mask forbidding attention across wrapped-around regions after a cyclic shift."""
    d, h, w = grid
    img = torch.zeros(1, d, h, w, 1, device=device)
    cnt = 0
    slices = []
    for g, ws, s in zip(grid, window, shift):
        if s > 0:
            slices.append((slice(0, -ws), slice(-ws, -s), slice(-s, None)))
        else:
            slices.append((slice(None),))
    for sd, sh, sw in itertools.product(*slices):
        img[:, sd, sh, sw, :] = cnt
        cnt += 1
    win = window_partition(img, window).squeeze(-1)  # (n_windows, N)
    mask = win.unsqueeze(1) - win.unsqueeze(2)
    return mask.masked_fill(mask != 0, float("-inf")).masked_fill(mask == 0, 0.0)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, grid, window, shifted, mlp_ratio):
        super().__init__()
        self.grid = tuple(grid)
        self.window = tuple(min(w, g) for w, g in zip(window, grid))
        if shifted:
            self.shift = tuple(0 if g <= w else w // 2 for g, w in zip(self.grid, self.window))
        else:
            self.shift = (0, 0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, self.window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._attn_mask = None

    def _padded(self, x):
        pads = [(-g) % w for g, w in zip(self.grid, self.window)]
        if any(pads):
            x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        return x, pads

    def forward(self, x):
        # x: (B, D, H, W, C)
        shortcut = x
        x = self.norm1(x)
        x, pads = self._padded(x)
        dims = x.shape[1:4]
        if any(self.shift):
            x = torch.roll(x, shifts=[-s for s in self.shift], dims=(1, 2, 3))
            if self._attn_mask is None or self._attn_mask.device != x.device:
                self._attn_mask = _shift_attn_mask(dims, self.window, self.shift, x.device)
            attn_mask = self._attn_mask
        else:
            attn_mask = None
        windows = window_partition(x, self.window)
        windows = self.attn(windows, attn_mask)
        x = window_reverse(windows, self.window, dims)
        if any(self.shift):
            x = torch.roll(x, shifts=list(self.shift), dims=(1, 2, 3))
        if any(pads):
            x = x[:, : self.grid[0], : self.grid[1], : self.grid[2]]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2x2 neighborhood concatenation followed by linear reduction to 2C."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [
            x[:, i::2, j::2, k::2, :]
            for i, j, k in itertools.product((0, 1), repeat=3)
        ]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class PatchEmbed(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv3d(1, cfg.embed_dim, kernel_size=cfg.patch_size,
                              stride=cfg.patch_size)
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x):
        # x: (B, 1, Z, Y, X) -> (B, z, y, x, C)
        for axis, (n, p) in enumerate(zip(x.shape[2:], self.patch_size)):
            if n % p != 0:
                raise ValueError(
                    f"input axis {axis} (size {n}) is not divisible by patch size {p}"
                )
        x = self.proj(x)
        return self.norm(x.permute(0, 2, 3, 4, 1))


class Encoder(nn.Module):
    """Four-stage hierarchical encoder over patch tokens.

    ``forward`` returns one feature map per stage, channel-last. With
    ``collect_taps=True`` it also returns every block output (plus the patch
    embedding) for feature-similarity probes.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.mask_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(N_STAGES):
            blocks = nn.ModuleList(
                SwinBlock(
                    dim=cfg.stage_width(s),
                    heads=cfg.heads[s],
                    grid=cfg.stage_grid(s),
                    window=cfg.window_size,
                    shifted=(b % 2 == 1),
                    mlp_ratio=cfg.mlp_ratio,
                )
                for b in range(cfg.depths[s])
            )
            self.stages.append(blocks)
            if s < N_STAGES - 1:
                self.merges.append(PatchMerging(cfg.stage_width(s)))

    def apply_mask(self, tokens: torch.Tensor, mask) -> torch.Tensor:
        """Replace masked stage-0 tokens with the learned mask embedding."""
        mask = torch.as_tensor(np.asarray(mask), device=tokens.device)
        if mask.dtype != torch.bool:
            mask = mask.bool()
        if mask.ndim == 3:
            mask = mask.unsqueeze(0).expand(tokens.shape[0], -1, -1, -1)
        if mask.shape != tokens.shape[:4]:
            raise ValueError(
                f"mask shape {tuple(mask.shape)} does not match stage-0 grid "
                f"{tuple(tokens.shape[:4])}"
            )
        return torch.where(mask.unsqueeze(-1), self.mask_token.to(tokens.dtype), tokens)

    def forward(self, x, mask=None, collect_taps: bool = False):
        x = self.patch_embed(x)
        if mask is not None:
            x = self.apply_mask(x, mask)
        taps = [("patch_embed", x)] if collect_taps else None
        features = []
        for s in range(N_STAGES):
            for b, block in enumerate(self.stages[s]):
                x = block(x)
                if collect_taps:
                    taps.append((f"stage{s}.block{b}", x))
            features.append(x)
            if s < N_STAGES - 1:
                x = self.merges[s](x)
        if collect_taps:
            return features, taps
        return features


def tap_names(cfg: EncoderConfig) -> list[str]:
    names = ["patch_embed"]
    for s in range(N_STAGES):
        names += [f"stage{s}.block{b}" for b in range(cfg.depths[s])]
    return names


# ---------------------------------------------------------------------------
# Parameter handling


def _trunc_normal(rng: np.random.Generator, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


def init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Deterministically (re)initialize all parameters from a numpy Generator.

    Matrices and patch/conv kernels get truncated normals (conv kernels
    Kaiming-scaled), norm weights ones, biases zeros, so two modules built
    from equal configs and seeds are parameter-identical.
    """
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim == 5:  # 3D conv kernels
                fan_in = p.numel() // p.shape[0]
                p.copy_(torch.from_numpy(
                    rng.normal(0.0, np.sqrt(2.0 / fan_in), tuple(p.shape))
                ).to(p.dtype))
            elif p.ndim >= 2:
                p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape))).to(p.dtype))
            elif name.endswith("mask_token"):
                p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape))).to(p.dtype))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.fill_(0.0)


class ParameterSet(dict):
    """Named map from layer path to numpy array."""

    @property
    def total_count(self) -> int:
        return int(sum(a.size for a in self.values()))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterSet":
        return cls({
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()
        })


def load_parameters(module: nn.Module, params: dict) -> None:
    """Load arrays into a module, rejecting on the first mismatching layer path."""
    state = module.state_dict()
    for name in state:
        if name not in params:
            raise ValueError(f"parameter set is missing layer {name!r}")
        have = tuple(np.asarray(params[name]).shape)
        want = tuple(state[name].shape)
        if have != want:
            raise ValueError(
                f"parameter shape mismatch at {name!r}: checkpoint {have}, model {want}"
            )
    with torch.no_grad():
        for name, tensor in module.state_dict().items():
            tensor.copy_(torch.from_numpy(np.asarray(params[name])).to(tensor.dtype))


def parameter_count(cfg: EncoderConfig) -> int:
    """Exact number of learnable scalars in an encoder built from ``cfg``."""
    model = Encoder(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Functional operations on numpy volumes (single sample, batchless)


def _as_input_tensor(voxels: np.ndarray) -> torch.Tensor:
    arr = np.asarray(voxels, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got ndim={arr.ndim}")
    return torch.from_numpy(arr)[None, None]


def patch_embed(voxels, cfg: EncoderConfig, params: dict | None = None) -> TokenGrid:
    """Linear projection of non-overlapping patches to embed_dim channels."""
    model = Encoder(cfg)
    if params is not None:
        load_parameters(model, params)
    model.eval()
    with torch.no_grad():
        tokens = model.patch_embed(_as_input_tensor(voxels))
    return TokenGrid(tokens=tokens[0].numpy(), stage=0)


def encode(voxels, cfg: EncoderConfig, params: dict, mask=None) -> list[TokenGrid]:
    """Run the full encoder, returning one TokenGrid per stage."""
    model = Encoder(cfg)
    load_parameters(model, params)
    model.eval()
    with torch.no_grad():
        features = model(_as_input_tensor(voxels), mask=mask)
    return [TokenGrid(tokens=f[0].numpy(), stage=s) for s, f in enumerate(features)]


def pooled_embedding(features: list[TokenGrid]) -> np.ndarray:
    """Global average pool of the last-stage grid."""
    if not features:
        raise ValueError("feature list is empty")
    last = features[-1].tokens
    return last.mean(axis=(0, 1, 2))


def pooled_embedding_torch(features: list[torch.Tensor]) -> torch.Tensor:
    return features[-1].mean(dim=(1, 2, 3))


# ---------------------------------------------------------------------------
# Checkpoints


def save_model_checkpoint(path, module: nn.Module, cfg: EncoderConfig, *,
                          step: int = 0, extra: dict | None = None) -> None:
    """Archive a model's arrays together with the encoder config and hash."""
    from . import storage

    manifest = {
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "step": int(step),
    }
    manifest.update(extra or {})
    storage.save_checkpoint(path, ParameterSet.from_module(module), manifest)


def load_model_checkpoint(path, expect_cfg: EncoderConfig | None = None):
    """Load (arrays, manifest), optionally enforcing config-hash compatibility."""
    from . import storage

    arrays, manifest = storage.load_checkpoint(path)
    if expect_cfg is not None:
        want = config_hash(expect_cfg)
        have = manifest.get("config_hash")
        if have != want:
            raise ValueError(
                f"checkpoint config hash {have} does not match requested config {want}"
            )
    return ParameterSet(arrays), manifest


def extract_encoder_arrays(arrays: dict) -> ParameterSet:
    """Pull the encoder sub-tree out of a full-model parameter set."""
    prefix = "encoder."
    out = ParameterSet({
        name[len(prefix):]: arr for name, arr in arrays.items()
        if name.startswith(prefix)
    })
    if not out:
        raise ValueError("checkpoint contains no encoder arrays")
    return out
