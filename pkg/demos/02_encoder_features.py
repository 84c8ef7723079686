"""The shared backbone: hierarchical windowed attention over 3D patches.

Spatial extent halves and channel width doubles at each of the four stages.
A learned mask embedding can hide any subset of stage-0 tokens; the output is
then exactly independent of the voxels underneath.
"""

import numpy as np

from voxbench.encoder import (
    Encoder,
    EncoderConfig,
    ParameterSet,
    encode,
    get_preset,
    init_parameters,
    parameter_count,
    pooled_embedding,
)
from voxbench.phantoms import generate_phantom, normalize_intensity

cfg = EncoderConfig()  # the desk default
print(f"desk config: depths={cfg.depths} heads={cfg.heads} embed={cfg.embed_dim}")
print(f"stage grids: {[cfg.stage_grid(s) for s in range(4)]}")
print(f"stage widths: {[cfg.stage_width(s) for s in range(4)]}")

model = Encoder(cfg)
init_parameters(model, np.random.default_rng(0))
params = ParameterSet.from_module(model)

vol, _ = generate_phantom(3, "A")
voxels = normalize_intensity(vol, (0.0, 1000.0)).voxels
features = encode(voxels, cfg, params)
for grid in features:
    print(f"  stage {grid.stage}: {grid.grid_shape} x {grid.channels} channels")

pooled = pooled_embedding(features)
print(f"pooled embedding: {pooled.shape[0]} dims")

# Masked tokens make the output independent of the underlying voxels.
mask = np.zeros(cfg.stage_grid(0), dtype=bool)
mask[:8] = True
scrambled = voxels.copy()
scrambled[:16] = np.random.default_rng(1).random((16, 32, 32))
f1 = encode(voxels, cfg, params, mask=mask)
f2 = encode(scrambled, cfg, params, mask=mask)
assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(f1, f2))
print("masked-region invariance holds exactly")

# Parameter counts, desk vs the full-size presets.
for name in ("desk", "paper-base", "smit-s", "smit-p"):
    n = parameter_count(get_preset(name))
    print(f"encoder parameters [{name}]: {n / 1e6:.2f} M")
