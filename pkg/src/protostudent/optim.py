"""SGD with momentum, weight decay, and step-decay learning rates."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    """Momentum SGD over named parameter groups.

    Each group is {"params": [Tensor, ...], "lr": float}; momentum and
    weight decay are shared. The effective rate is lr * gamma^(epoch //
    step_epochs), updated via set_epoch.
    """

    def __init__(self, groups, momentum: float = 0.9, weight_decay: float = 1e-4,
                 step_epochs: int = 10, gamma: float = 0.1,
                 max_grad_norm: float = 10.0):
        self.groups = groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.step_epochs = step_epochs
        self.gamma = gamma
        self.max_grad_norm = max_grad_norm
        self.scale = 1.0
        self._velocity = {}
        for g in groups:
            for p in g["params"]:
                self._velocity[id(p)] = np.zeros_like(p.data)

    def set_epoch(self, epoch: int):
        self.scale = self.gamma ** (epoch // self.step_epochs) if self.step_epochs > 0 else 1.0

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self):
        clip = 1.0
        if self.max_grad_norm:
            sq = 0.0
            for g in self.groups:
                for p in g["params"]:
                    if p.grad is not None:
                        sq += float(np.sum(p.grad * p.grad))
            norm = np.sqrt(sq)
            if norm > self.max_grad_norm:
                clip = self.max_grad_norm / norm
        for g in self.groups:
            lr = g["lr"] * self.scale
            for p in g["params"]:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                v = self._velocity[id(p)]
                v *= self.momentum
                v += clip * grad + self.weight_decay * p.data
                p.data -= lr * v

    def reset_velocity(self, param: Tensor, indices=None):
        """Clear momentum state, optionally only at given indices."""
        v = self._velocity[id(param)]
        if indices is None:
            v[...] = 0.0
        else:
            v[indices] = 0.0
