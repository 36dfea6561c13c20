"""Adam with named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    lr: float
    last_lr: float = 0.0
    state: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


class Adam:
    """Adaptive moment estimation; each group's rate is ``group.lr * factor``
    where ``factor`` comes from the schedule on every :meth:`step`."""

    def __init__(self, groups: dict[str, tuple[list[Tensor], float]], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.groups = []
        for name, (params, lr) in groups.items():
            if lr < 0:
                raise ValueError(f"learning rate for group {name!r} must be non-negative, got {lr}")
            g = ParamGroup(name, list(params), float(lr))
            g.state = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in g.params]
            self.groups.append(g)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()

    def step(self, factor: float = 1.0) -> dict[str, float]:
        """Apply one update; returns the rate actually applied per group."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        applied = {}
        for g in self.groups:
            lr = g.lr * factor
            g.last_lr = lr
            applied[g.name] = lr
            for p, (m, v) in zip(g.params, g.state):
                if p.grad is None:
                    continue
                grad = p.grad
                if self.weight_decay:
                    grad = grad + self.weight_decay * p.data
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if lr:
                    p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return applied
