"""Adam with cosine learning-rate decay, shared by the diffusion training
loop and the reference localizer."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(peak: float, step: int, budget: int) -> float:
    """Cosine decay from `peak` at step 0 to exactly 0 at step == budget."""
    if budget <= 0:
        return peak
    frac = min(max(step / budget, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        """Update params in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p -= (lr * update).astype(p.dtype, copy=False)
