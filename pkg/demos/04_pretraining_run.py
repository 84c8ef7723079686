"""A small pretraining run: one method, a handful of volumes, loss log.

The teacher-free methods just take optimizer steps; distillation methods
additionally apply the EMA teacher update and the center update after each
step, with the teacher temperature warming up across epochs.
"""

import tempfile
from pathlib import Path

import numpy as np

from voxbench.encoder import EncoderConfig, save_model_checkpoint
from voxbench.phantoms import generate_phantom, normalize_intensity
from voxbench.pretext import MethodConfig, run_pretraining, write_loss_log

enc = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), embed_dim=8,
                    input_shape=(16, 16, 16))

volumes = []
for seed in range(12):
    vol, _ = generate_phantom(seed, "A", shape=(16, 16, 16))
    volumes.append(normalize_intensity(vol, (0.0, 1000.0)).voxels)

cfg = MethodConfig("smit")
state, reports = run_pretraining(
    cfg, enc, volumes, steps=40, seed=0, batch_size=4, base_lr=1e-3,
    warmup_steps=5,
)
print(f"smit pretraining, {len(reports)} steps:")
for r in reports[::8]:
    parts = ", ".join(f"{k}={v:.3f}" for k, v in r.parts.items())
    print(f"  step {r.step:3d}: total={r.total:.4f} lr={r.lr:.2e} "
          f"tau_t={r.tau_t:.4f} ({parts})")
print(f"loss: {reports[0].total:.4f} -> {reports[-1].total:.4f}")

with tempfile.TemporaryDirectory() as d:
    log = Path(d) / "losses.csv"
    write_loss_log(log, reports)
    print(f"CSV log: {log.read_text().splitlines()[0]}")
    ckpt = Path(d) / "smit.ckpt"
    save_model_checkpoint(ckpt, state.student, enc, step=len(reports),
                          extra={"kind": "pretext", "method": "smit"})
    print(f"checkpoint written ({ckpt.stat().st_size} bytes)")
