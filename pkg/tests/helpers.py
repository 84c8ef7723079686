"""Shared helpers for the test suite."""

import numpy as np
import torch

from voxbench import pretext
from voxbench.encoder import EncoderConfig

TINY_ENC = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), embed_dim=8,
                         input_shape=(16, 16, 16))
TINY_DISTILL = pretext.DistillConfig(head_output_dim=16)


def tiny_state(method, seed=0, enc_cfg=TINY_ENC, **over):
    cfg = pretext.MethodConfig(method, distill=TINY_DISTILL, **over)
    state = pretext.init_state(cfg, enc_cfg, np.random.default_rng(seed))
    return cfg, state


def tiny_batch(cfg, seed=1, n=2, enc_cfg=TINY_ENC):
    rng = np.random.default_rng(seed)
    vols = [rng.random(enc_cfg.input_shape).astype(np.float32) for _ in range(n)]
    return pretext.make_batch(cfg, enc_cfg, vols, np.random.default_rng(seed + 100),
                              "test-batch")


def to_double(state, batch=None):
    """Cast a teacher-student state (and optionally a batch) to float64."""
    state.student.double()
    if state.teacher is not None:
        state.teacher.double()
    if state.center is not None:
        state.center = state.center.double()
    if batch is not None:
        for name in ("volumes", "rot_volumes"):
            t = getattr(batch, name)
            if t is not None:
                setattr(batch, name, t.double())
        if batch.views is not None:
            batch.views = (batch.views[0].double(), batch.views[1].double())
    return state, batch
