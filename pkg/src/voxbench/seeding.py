"""Deterministic RNG fan-out.

One master seed feeds every stage of a benchmark run. Each stage derives its
own independent numpy Generator from (master_seed, *names), so stages can be
re-run or parallelized without consuming each other's random streams, and the
derivation is stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *names) -> int:
    """Map (master_seed, names...) to a stable 64-bit seed.

    Names may be strings or ints; the mapping uses SHA-256 so it does not
    depend on Python's per-process hash randomization.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(master_seed: int, *names) -> np.random.Generator:
    """Independent Generator for the substream identified by names."""
    return np.random.default_rng(derive_seed(master_seed, *names))
