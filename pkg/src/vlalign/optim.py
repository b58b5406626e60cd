"""Optimizers: decoupled-weight-decay AdamW for training stages, and
SGD with momentum for the linear probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class OptimizerError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """Per-parameter first/second moments and step counters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.steps.pop(name, None)


def adamw_step(
    params: dict,
    trainable: Iterable[str],
    state: OptimizerState,
    lr_for: Callable[[str], float],
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """One AdamW update over the trainable set (sorted order, deterministic).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    Parameters outside the trainable set are untouched; a missing gradient
    counts as zero (weight decay still applies).
    """
    b1, b2 = betas
    for name in sorted(trainable):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None or m.shape != p.data.shape:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.steps[name] = 0
        else:
            v = state.v[name]
        t = state.steps[name] + 1
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data[...] = p.data - lr_for(name) * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
        state.m[name] = m
        state.v[name] = v
        state.steps[name] = t


def sgd_momentum_step(
    params: dict,
    trainable: Iterable[str],
    velocity: dict,
    lr: float,
    momentum: float = 0.9,
) -> None:
    for name in sorted(trainable):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        vel = velocity.get(name)
        if vel is None:
            vel = np.zeros_like(p.data)
        vel[...] = momentum * vel + g
        p.data[...] = p.data - lr * vel
        velocity[name] = vel
