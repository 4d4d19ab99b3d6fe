from __future__ import annotations

import numpy as np


def adam_step(params: dict, grads: dict, m: dict, v: dict, step: int, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> int:
    """In-place Adam update of every parameter that has a gradient.

    ``step`` is the number of updates already applied; returns the new count.
    Moment buffers must start at zero.
    """
    step += 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for k, g in grads.items():
        if g is None:
            continue
        m[k] *= beta1
        m[k] += (1.0 - beta1) * g
        v[k] *= beta2
        v[k] += (1.0 - beta2) * (g * g)
        params[k] -= (lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)).astype(params[k].dtype)
    return step


class Adam:
    """Adam over a dict of arrays, owning its moment buffers."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t = adam_step(self.params, grads, self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps)
