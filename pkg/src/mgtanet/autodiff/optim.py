"""Adam with bias correction, gradient clipping and the one-cycle schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import TrainingError
from .tensor import ParamStore


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    b1, b2 = betas
    for name, t in store.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, t in store.items():
        g = t.grad
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * t.data
        m = store.adam_m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            store.adam_v[name] = np.zeros_like(t.data)
        v = store.adam_v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        store.adam_m[name] = m
        store.adam_v[name] = v
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in store.params.values()
                          if t.grad is not None))
    if total > max_norm > 0:
        store.scale_grads(max_norm / (total + 1e-12))
    return total


def one_cycle_lr(step: int, total_steps: int, lr_max: float, div_factor: float = 10.0,
                 pct_start: float = 0.4, final_div: float = 1e4) -> float:
    """Cosine warm-up to ``lr_max`` then cosine annealing to ``lr_max/(div*final_div)``."""
    if total_steps <= 1:
        return lr_max
    lr_start = lr_max / div_factor
    lr_end = lr_start / final_div
    warm = max(int(round(pct_start * total_steps)), 1)
    if step < warm:
        frac = step / warm
        return lr_start + (lr_max - lr_start) * (1 - math.cos(math.pi * frac)) / 2
    frac = (step - warm) / max(total_steps - warm - 1, 1)
    frac = min(frac, 1.0)
    return lr_end + (lr_max - lr_end) * (1 + math.cos(math.pi * frac)) / 2
