"""SGD with heavy-ball momentum, coupled weight decay and a step LR schedule."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float, weight_decay: float, velocity: Sequence[np.ndarray]) -> None:
    """In-place update: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise DimensionError("sgd_step: params, grads and velocity differ in length")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if not (p.shape == g.shape == v.shape):
            raise DimensionError(
                f"sgd_step: shape mismatch at slot {i}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise ParameterError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params],
                 self.lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def step_lr(base_lr: float, epoch: int, decay_epochs: Sequence[int], factor: float) -> float:
    """Learning rate for a 0-indexed ``epoch``: one ``factor`` per milestone already reached."""
    passed = sum(1 for m in decay_epochs if epoch >= m)
    return base_lr * factor ** passed
