from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr = self.lr
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            if lr:
                p.data -= p.data.dtype.type(lr) * v
