"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               n_samples: int | None = 50, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is re-evaluated with each sampled coordinate nudged by +/- eps.
    Relative error uses denominator max(|a|, |b|, 1e-8).  When ``n_samples``
    is None every coordinate is checked.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("objective is not finite")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in pick]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = float(f().data)
        flat[j] = orig - eps
        down = float(f().data)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError("objective is not finite under perturbation")
        numeric = (up - down) / (2 * eps)
        a = analytic[i].reshape(-1)[j]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst
