"""SGD with momentum and L2 weight decay."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """Momentum SGD.

    Update rule, per parameter::

        v <- momentum * v - lr * (grad + weight_decay * param)
        param <- param + v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params: list[Tensor] = list(params)
        self.learning_rate = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: list[np.ndarray] = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        # zeros rather than None: parameters the loss never reaches still get a (zero) gradient
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name or i} has no gradient; run backward() first")
        lr, mu, wd = self.learning_rate, self.momentum, self.weight_decay
        for p, v in zip(self.params, self.velocity):
            v *= mu
            v -= lr * (p.grad + wd * p.data)
            p.data += v

    def load_velocity(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} velocity arrays, got {len(arrays)}")
        for p, v in zip(self.params, arrays):
            if v.shape != p.shape:
                raise ValueError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        self.velocity = [np.array(v, dtype=np.float64) for v in arrays]


def grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
