"""AdamW with decoupled weight decay and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float = 5e-4
    total_steps: int = 1
    warmup_steps: int = 0
    min_lr: float = 0.0


def cosine_lr(step: int, sched: CosineSchedule) -> float:
    """Learning rate at ``step``: linear warmup, then half-cosine to ``min_lr``.

    Steps past ``total_steps`` clamp to ``min_lr``.
    """
    if step >= sched.total_steps:
        return sched.min_lr
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    frac = (step - sched.warmup_steps) / span
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled-weight-decay Adam over a list of named parameters.

    Moment buffers are allocated only for trainable parameters; frozen ones
    are never touched.
    """

    def __init__(self, named_params, schedule: CosineSchedule, weight_decay=0.05,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    @property
    def lr(self) -> float:
        return cosine_lr(self.step_count, self.schedule)

    def step(self, grads: dict) -> float:
        """Apply one update and return the learning rate used."""
        lr = self.lr
        t = self.step_count + 1
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                raise KeyError(f"no gradient for trainable parameter {name!r}")
            if g.shape != p.shape:
                raise ShapeError("adamw_step", p.shape, g.shape, name)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            w = p.data
            if self.weight_decay:
                w = w * (1.0 - lr * self.weight_decay)
            w = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = w.astype(p.dtype)
        self.step_count = t
        return lr
