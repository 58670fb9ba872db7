"""Nesterov SGD and the step learning-rate schedule."""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, Sequence

import numpy as np

from densekit.errors import ConfigError, UsageError


def sgd_nesterov_step(params: Sequence, grads: Sequence, state: Dict[int, np.ndarray], lr: float,
                      momentum: float, weight_decay: float, nesterov: bool = True) -> None:
    """In-place update of ``params`` (arrays or tensors).

    d = g + wd * p;  v = momentum * v + d;  p -= lr * (d + momentum * v)
    (p -= lr * v without Nesterov). No dampening. ``state`` holds the
    velocities, keyed by position.
    """
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if not isinstance(p, np.ndarray):
            p = p.data
        if g is None:
            continue
        if p.shape != g.shape:
            raise ConfigError(f"parameter {i} has shape {p.shape} but its gradient has shape {g.shape}")
        d = g + weight_decay * p if weight_decay else np.array(g, dtype=p.dtype, copy=True)
        v = state.get(i)
        if v is None:
            v = state[i] = np.zeros_like(p)
        v *= momentum
        v += d
        if nesterov:
            p -= lr * (d + momentum * v)
        else:
            p -= lr * v


def lr_at(epoch: int, config) -> float:
    """Learning rate for ``epoch``: lr0 divided by 1/lr_factor at each passed milestone."""
    if not 0 <= epoch < config.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for f in config.milestones if epoch >= Fraction(str(f)) * config.epochs)
    return config.lr0 / (1.0 / config.lr_factor) ** passed
