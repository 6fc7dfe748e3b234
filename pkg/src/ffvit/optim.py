"""AdamW with decoupled weight decay, warmup + cosine schedule, and global
gradient-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import TrainConfig
from .errors import StateError
from .tensor import Tensor


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> OptimizerState:
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def resolve_warmup(config: TrainConfig, steps_per_epoch: int) -> int:
    return steps_per_epoch if config.warmup_steps is None else config.warmup_steps


def lr_at(step: int, config: TrainConfig, total_steps: int, warmup_steps: int | None = None) -> float:
    """Learning rate at ``step`` in ``[0, total_steps]``.

    Linear warmup from 0 to the peak over ``warmup_steps``, then either
    constant or a half-cosine decaying to 0 at ``total_steps``. Update number
    ``k`` (1-based) uses ``lr_at(k)``.
    """
    warmup = config.warmup_steps if warmup_steps is None else warmup_steps
    warmup = warmup or 0
    peak = config.learning_rate
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if config.schedule == "constant":
        return peak
    span = max(1, total_steps - warmup)
    progress = min(1.0, max(0.0, (step - warmup) / span))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None,
               state: OptimizerState, config: TrainConfig, lr: float | None = None) -> None:
    """One AdamW update. ``grads=None`` reads each parameter's ``.grad``."""
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    resolved = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise StateError(f"no gradient for parameter {name!r}")
        resolved[name] = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.dtype)
    for name, p in params.items():
        g = resolved[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
        state.m[name] = m
        state.v[name] = v
    state.step = t
