from __future__ import annotations

import math
import warnings

from .params import ParameterStore


def sgd_step(params: ParameterStore, gradients, lr, weight_decay=0.0) -> ParameterStore:
    """Plain SGD: ``w <- w - lr * (g + weight_decay * w)`` for each key in ``gradients``.

    Keys excluded from decay (gates, shortcut weights) only take the
    gradient term. Returns a new store; ``params`` is left untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    out = params.copy()
    if lr == 0:
        return out
    for key, g in gradients.items():
        if not params.trainable(key):
            raise KeyError(f"{key!r} is not a trainable parameter")
        w = params[key]
        wd = weight_decay if params.decays(key) else 0.0
        out[key] = w - lr * (g + wd * w)
    return out


def cosine_lr(t, T, lr0):
    """Cosine decay from ``lr0`` at step 0 to 0 at step ``T``."""
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if t < 0:
        raise ValueError("step t must be non-negative")
    if t > T:
        warnings.warn(f"step {t} beyond horizon {T}; learning rate clamped to 0", stacklevel=2)
        return 0.0
    return lr0 * (1.0 + math.cos(math.pi * t / T)) / 2.0
