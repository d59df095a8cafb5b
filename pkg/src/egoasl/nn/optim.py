from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction. State lives in plain arrays so the trainer
    can checkpoint it: ``m``/``v`` per parameter and an integer ``step``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Functional form on raw arrays. ``state`` is a dict with keys
    ``m``, ``v`` (lists of arrays) and ``step``; returns (new_params, new_state)."""
    b1, b2 = betas
    t = state["step"] + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - (lr / c1) * m / (np.sqrt(v / c2) + eps))
    return new_p, {"m": new_m, "v": new_v, "step": t}
