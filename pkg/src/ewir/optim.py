"""Momentum SGD with coupled L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import torch


class SGD:
    """Plain momentum SGD.

    Per parameter ``p`` with gradient ``g``::

        d = g + weight_decay * p
        v = momentum * v + d        (v = d on the first step)
        p = p - lr * v

    Gradients are cleared after each step.
    """

    def __init__(self, params: Iterable[torch.nn.Parameter], momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: list[torch.Tensor | None] = [None] * len(self.params)

    @torch.no_grad()
    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad
            if self.weight_decay:
                d = d.add(p, alpha=self.weight_decay)
            if self.momentum:
                v = self.velocity[i]
                if v is None:
                    v = self.velocity[i] = d.clone()
                else:
                    v.mul_(self.momentum).add_(d)
                d = v
            p.add_(d, alpha=-lr)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

