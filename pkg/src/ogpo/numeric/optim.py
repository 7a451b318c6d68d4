"""Adam with decoupled weight decay and warmup/cosine learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    schedule: str = "constant"  # or "cosine"
    warmup_steps: int = 0
    decay_steps: int = 0
    end_value: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lr_at(step: int, state: OptimState, base_lr: float) -> float:
    """Linear warmup from 0, then cosine decay to ``end_value`` (or flat)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if state.schedule == "constant":
        return base_lr
    if step < state.warmup_steps:
        return base_lr * step / state.warmup_steps
    if state.decay_steps <= 0:
        return base_lr
    frac = min(1.0, (step - state.warmup_steps) / state.decay_steps)
    return state.end_value + 0.5 * (base_lr - state.end_value) * (1.0 + math.cos(math.pi * frac))


def adam_update(params, grads, state: OptimState, lr: float):
    """One bias-corrected Adam step. Pure: returns ``(new_params, new_state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ValueError(f"grad shape {np.shape(g)} != param shape {np.shape(p)} for {k}")
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        upd = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            upd = upd - lr * state.weight_decay * p
        new_params[k], new_m[k], new_v[k] = upd, m, v
    new_state = OptimState(**{**state.__dict__, "m": new_m, "v": new_v, "step": t})
    return new_params, new_state


class Adam:
    """Stateful wrapper that writes updates into the live parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, **schedule):
        self.params = params
        self.base_lr = lr
        self.state = OptimState(**schedule)

    @property
    def lr(self) -> float:
        return lr_at(self.state.step, self.state, self.base_lr)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        # warmup starts at lr 0; step from the first nonzero rate
        lr = lr_at(self.state.step + 1, self.state, self.base_lr) if self.state.schedule == "cosine" else self.base_lr
        new, self.state = adam_update(self.params, grads, self.state, lr)
        for k, v in new.items():
            self.params[k][...] = v
        return lr


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
