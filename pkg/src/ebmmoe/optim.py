"""Adaptive-moment (Adam) updates over named parameter tensors."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        """Descend along ``grads`` (gradients of a loss); updates ``params`` in place."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, names) -> dict:
        return {
            "step": self.step_count,
            "m": {k: self.m.get(k) for k in names},
            "v": {k: self.v.get(k) for k in names},
        }
