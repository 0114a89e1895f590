"""In-place SGD and Adam over dicts of named parameter arrays."""

from __future__ import annotations

import numpy as np


class Sgd:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = self.params[name]
            p -= (self.lr * g).astype(p.dtype)


class Adam:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)
            p -= update.astype(p.dtype)


def make_optimizer(kind: str, params: dict[str, np.ndarray], lr: float, **kw):
    if kind == "sgd":
        return Sgd(params, lr)
    if kind == "adam":
        return Adam(params, lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
