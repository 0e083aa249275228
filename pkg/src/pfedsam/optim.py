from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a name->Tensor map.

    Parameters without a gradient in a step are skipped entirely (their
    moments do not decay), matching the usual ``grad is None`` convention.
    Updates replace ``param.data`` with a new array rather than writing in
    place, so arrays shared with other models are never mutated.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.params:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p = self.params[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
