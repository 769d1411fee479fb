"""Gradient-descent optimizers over Parameter lists."""
from __future__ import annotations

import numpy as np

from .layers import Parameter


class NonFiniteGradientError(RuntimeError):
    """Raised before any update when a gradient contains NaN or inf."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter '{param_name}'")
        self.param_name = param_name


def _check_finite(params: list[Parameter]) -> None:
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(p.name)


class Sgd:
    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        _check_finite(self.params)
        for p, v in zip(self.params, self._vel):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: list[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        _check_finite(self.params)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
