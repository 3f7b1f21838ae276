"""Adam with a cosine-annealed learning rate, over named numpy parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, base_lr, step, total_steps, trainable=None):
    """In-place Adam update of ``params[name]`` for each trainable name.

    ``step`` indexes the cosine schedule (0 gives the base rate, ``total_steps``
    gives zero); Adam's bias correction uses its own counter in ``state``.
    Returns the learning rate that was applied.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside schedule of {total_steps} steps")
    names = list(params) if trainable is None else [n for n in params if n in trainable]
    for name in names:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient in {name}")
    lr = cosine_lr(base_lr, step, total_steps)
    state.t += 1
    c1 = 1.0 - BETA1**state.t
    c2 = 1.0 - BETA2**state.t
    for name in names:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if lr != 0.0:
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return lr
