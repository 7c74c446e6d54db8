from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from beliefgeom.nn.tensor import Parameter


class AdamW:
    """AdamW with decoupled weight decay.

    The learning rate can be changed between steps (``opt.lr = ...``) to
    implement schedules.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        adamw_step(self.params, self.lr, self.betas, self.weight_decay, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(
    params: Sequence[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """Apply one in-place AdamW update to every parameter holding a gradient."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    b1, b2 = betas
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * g * g
        mhat = p.m / (1 - b1**p.step)
        vhat = p.v / (1 - b2**p.step)
        if weight_decay:
            p.data *= 1 - lr * weight_decay
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def cosine_lr(step: int, total: int, base: float, warmup: int = 0, floor: float = 0.0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(1.0, frac)))
