from __future__ import annotations

import numpy as np

from .diffcore import Tensor


class Adam:
    """Adam over a named parameter dict; parameters without grads are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([float(self.t)])}
        for k in self.params:
            out[f"{prefix}m.{k}"] = self.m[k].copy()
            out[f"{prefix}v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}t"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}m.{k}"])
            self.v[k] = np.array(arrays[f"{prefix}v.{k}"])
