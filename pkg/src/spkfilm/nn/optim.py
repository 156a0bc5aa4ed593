"""SGD with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class OptimState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """In-place update ``v <- mu*v + g; theta <- theta - lr*v`` for every named tensor."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"no gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: momentum buffer shape {v.shape} != parameter shape {p.shape}")
        v *= state.momentum
        v += g
        p -= (state.learning_rate * v).astype(p.dtype)


class SGD:
    """Binds a module's parameters to an :class:`OptimState`."""

    def __init__(self, module, lr=0.01, momentum=0.9):
        self.module = module
        self.state = OptimState(lr, momentum)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = value

    def step(self):
        params = dict(self.module.named_parameters())
        grads = dict(self.module.named_grads())
        sgd_momentum_step(params, grads, self.state)
