"""In-place optimizers over ``PolicyParams.tensors``."""
from __future__ import annotations

import numpy as np


class SGD:
    """Plain gradient step; ``ascent=True`` climbs the objective instead."""

    def __init__(self, lr: float, ascent: bool = False):
        self.lr = lr
        self.sign = 1.0 if ascent else -1.0

    def step(self, tensors: dict, grads: dict) -> None:
        for k, g in grads.items():
            tensors[k] += self.sign * self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = 1.0):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, tensors: dict, grads: dict) -> None:
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, self.clip_norm / (norm + 1e-12))
        else:
            scale = 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(grads):
            g = grads[k] * scale
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            tensors[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
