"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def grad_check(loss_fn, params: dict[str, Tensor], *, eps: float = 1e-5,
               max_params: int = 5000) -> float:
    """Compare analytic gradients of a deterministic scalar loss to central
    differences over every parameter entry; returns the worst relative error.

    `loss_fn` takes no arguments and must be a pure function of the current
    parameter values (fix seeds and masks outside).
    """
    total = sum(p.data.size for p in params.values())
    if total > max_params:
        raise ValueError(f"model has {total} parameters, finite differences capped at {max_params}")

    T.zero_all(params)
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                denom = max(1e-6, abs(a_flat[i]), abs(numeric))
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    T.zero_all(params)
    return worst
