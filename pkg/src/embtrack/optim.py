"""Adaptive moment estimation, shared by the matcher and motion trainers.

Parameters are updated in place so callers can hand in the live arrays
of their parameter structs. ``lr`` is a plain attribute; schedules just
assign to it between steps.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["Adam"]


class Adam:
    def __init__(
        self,
        arrays: list[np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if not arrays:
            raise ValueError("no parameter arrays")
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(a) for a in arrays]
        self._v = [np.zeros_like(a) for a in arrays]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.arrays):
            raise ValueError(f"{len(grads)} gradients for {len(self.arrays)} arrays")
        self.t += 1
        # fold both bias corrections into one scale on the raw moments
        scale = self.lr * math.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        for arr, grad, m, v in zip(self.arrays, grads, self._m, self._v):
            if grad.shape != arr.shape:
                raise ValueError(f"gradient shape {grad.shape} != {arr.shape}")
            m += (1.0 - self.beta1) * (grad - m)
            v += (1.0 - self.beta2) * (grad * grad - v)
            arr -= scale * m / (np.sqrt(v) + self.eps)
