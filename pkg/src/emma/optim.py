from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Matrix


def clip_grad_norm(params: Sequence[Matrix], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


class Adam:
    """Adam with optional linear warmup. Owns all parameter mutation."""

    def __init__(self, params: Sequence[Matrix], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9,
                 warmup: int = 0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup = warmup
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def current_lr(self) -> float:
        if self.warmup and self.step_count < self.warmup:
            return self.lr * (self.step_count + 1) / self.warmup
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad ** 2
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = p.data - update
            new.flags.writeable = False
            p.data = new
