from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpgm.errors import ContractError


@dataclass
class OptimizerState:
    """Plain SGD hyper-parameters plus per-parameter velocity buffers."""

    learning_rate: float
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.momentum < 0:
            raise ContractError(f"momentum must be non-negative, got {self.momentum}")


def sgd_step(params, state, allow_missing=False):
    """Apply ``w <- w - lr * v`` with ``v = momentum * v + grad``, then zero grads.

    Parameters without a gradient raise :class:`ContractError` unless
    ``allow_missing`` is set, in which case they are left untouched.
    """
    for name, p in params.items():
        if p.grad is None:
            if allow_missing:
                continue
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if state.momentum:
            v = state.velocity.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[name] = v
            g = v
        p.data -= state.learning_rate * g
        p.grad = None
    return params


class SGD:
    """Convenience wrapper binding a parameter subset to an optimizer state."""

    def __init__(self, params, learning_rate, momentum=0.0):
        self.params = params
        self.state = OptimizerState(learning_rate, momentum)

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        sgd_step(self.params, self.state, allow_missing=True)


def clip_grad_norm(params, max_norm):
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total
