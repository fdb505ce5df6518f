"""Adam."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float, frozen=()):
        """Apply one update; parameters in ``frozen`` (or without grad) are left untouched."""
        frozen = set(frozen)
        for k, p in self.params.items():
            if k in frozen or p.grad is None:
                continue
            g = p.grad
            self.t[k] += 1
            t = self.t[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)
