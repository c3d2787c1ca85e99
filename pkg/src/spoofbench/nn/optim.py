"""RMSprop optimization over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergedError
from .tensor import Tensor


@dataclass
class RmspropState:
    learning_rate: float = 2e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    acc: dict = field(default_factory=dict)


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 state: RmspropState) -> None:
    """In-place RMSprop update: acc <- d*acc + (1-d)*g^2, p <- p - lr*g/sqrt(acc+eps)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = state.decay * acc + (1.0 - state.decay) * g * g
        state.acc[name] = acc
        p.data -= state.learning_rate * g / np.sqrt(acc + state.epsilon)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
