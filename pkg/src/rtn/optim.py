"""Heavy-ball momentum SGD with an annealed learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Network, StateError


def lr_at(p: float, lr0: float = 0.01, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Annealed rate ``lr0 / (1 + alpha * p) ** beta`` at training progress ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    if lr0 <= 0 or alpha < 0 or beta < 0:
        raise ValueError("need lr0 > 0, alpha >= 0, beta >= 0")
    return lr0 / (1.0 + alpha * p) ** beta


@dataclass
class SgdState:
    total_steps: int
    lr0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    # effective per-parameter rates (lr_mult * lr) used by the last update
    last_rates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def progress(self) -> float:
        if self.total_steps == 0:
            return 0.0
        return min(self.step / self.total_steps, 1.0)

    def current_lr(self) -> float:
        return lr_at(self.progress, self.lr0, self.alpha, self.beta)


def step(state: SgdState, net: Network) -> None:
    """Apply one momentum update in place, then clear gradients.

    Weight decay adds ``weight_decay * w`` to the gradient of weight matrices
    only; biases are not decayed.
    """
    if not net.grads_ready:
        raise StateError("no gradients populated since the last step")
    lr = state.current_lr()
    for name, value, grad, mult in net.parameters():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(value)
        rate = mult * lr
        v *= state.momentum
        v -= rate * grad
        if state.weight_decay and name.endswith(".weight"):
            v -= rate * state.weight_decay * value
        value += v
        state.last_rates[name] = rate
    net.zero_grad()
    state.step += 1
