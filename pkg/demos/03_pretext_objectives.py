"""The nine self-supervised objectives, one toy batch each.

Shows the loss values on a fresh tiny model plus the identities that tie
composite objectives to their parts.
"""

import math

import numpy as np
import torch

from voxbench.encoder import EncoderConfig
from voxbench.pretext import (
    METHODS,
    DistillConfig,
    MethodConfig,
    infonce_pairing,
    init_state,
    loss_infonce,
    make_batch,
    method_loss,
    sample_mask,
)

enc = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), embed_dim=8,
                    input_shape=(16, 16, 16))
rng = np.random.default_rng(0)
volumes = [rng.random(enc.input_shape).astype(np.float32) for _ in range(2)]

print(f"{'method':16s} {'total':>8s}  parts")
for method in METHODS:
    cfg = MethodConfig(method, distill=DistillConfig(head_output_dim=32))
    state = init_state(cfg, enc, np.random.default_rng(1))
    batch = make_batch(cfg, enc, volumes, np.random.default_rng(2), "demo")
    total, parts, _ = method_loss(cfg, state, batch)
    part_str = ", ".join(f"{k}={float(v.detach()):.3f}" for k, v in parts.items())
    print(f"{method:16s} {float(total.detach()):8.4f}  {part_str}")

# Composite totals are exact weighted sums of their parts.
cfg = MethodConfig("smit", distill=DistillConfig(head_output_dim=32))
state = init_state(cfg, enc, np.random.default_rng(1))
batch = make_batch(cfg, enc, volumes, np.random.default_rng(2), "demo")
total, parts, _ = method_loss(cfg, state, batch)
resid = float(total.detach()) - (float(parts["mip"].detach())
                                 + 0.1 * float(parts["mpd"].detach())
                                 + 0.1 * float(parts["gtd"].detach()))
print(f"\nsmit bookkeeping residual (float32 forward): {resid:.2e}")

# Masking is exact: floor(ratio * tokens).
mask = sample_mask((4, 4, 4), ratio=0.75, rng=np.random.default_rng(3))
print(f"mask over 4x4x4 grid at ratio 0.75: {mask.count} of 64 tokens")

# InfoNCE sanity: equal similarities over three candidates give ln 3.
z = torch.ones(4, 3, dtype=torch.float64)
value = float(loss_infonce(z, infonce_pairing(2), t=0.5))
print(f"uniform InfoNCE (2N=4): {value:.6f}  (ln 3 = {math.log(3):.6f})")
