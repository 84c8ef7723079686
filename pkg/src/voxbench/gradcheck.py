"""Central finite-difference gradient checking for losses through models.

Works on float64 models: perturb randomly chosen parameter entries by +-eps,
re-evaluate the loss, and compare (f(x+eps) - f(x-eps)) / (2 eps) against the
autograd gradient. Entries whose analytic gradient is negligibly small are
skipped, since the difference quotient there is dominated by roundoff.
"""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_check(
    loss_fn,
    params,
    *,
    n_samples: int = 10,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    min_grad: float = 1e-6,
) -> float:
    """Return the worst relative error over ``n_samples`` sampled entries.

    ``loss_fn`` must be a zero-argument callable recomputing the full forward
    pass; ``params`` the tensors the loss depends on. All tensors must be
    float64 for the stated tolerances to be meaningful.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to check")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    candidates = [
        (p, g) for p, g in zip(params, grads)
        if g is not None and float(g.abs().max()) > min_grad
    ]
    if not candidates:
        raise ValueError("loss has no parameter with non-negligible gradient")

    worst = 0.0
    checked = 0
    attempts = 0
    while checked < n_samples:
        attempts += 1
        if attempts > 50 * n_samples:
            raise RuntimeError("could not find enough gradient entries above min_grad")
        p, g = candidates[int(rng.integers(len(candidates)))]
        idx = int(rng.integers(p.numel()))
        analytic = float(g.view(-1)[idx])
        if abs(analytic) <= min_grad:
            continue
        flat = p.data.view(-1)
        orig = float(flat[idx])
        flat[idx] = orig + eps
        plus = float(loss_fn().detach())
        flat[idx] = orig - eps
        minus = float(loss_fn().detach())
        flat[idx] = orig
        fd = (plus - minus) / (2 * eps)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
        if rel > 1e-5:
            # a perturbation crossing a piecewise-linear kink (LeakyReLU)
            # invalidates the central difference: the one-sided differences
            # then disagree by about twice the central-difference error,
            # whereas a genuine gradient bug through smooth code leaves them
            # in agreement. Resample kink crossings.
            center = float(loss_fn().detach())
            left = (center - minus) / eps
            right = (plus - center) / eps
            if abs(left - right) >= abs(fd - analytic):
                continue
        worst = max(worst, rel)
        checked += 1
    return worst
