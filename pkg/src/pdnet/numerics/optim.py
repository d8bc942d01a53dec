"""Decoupled-weight-decay Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None) -> tuple[dict, OptimizerState]:
    """One AdamW update. Returns new parameter arrays; ``state`` is advanced in place.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied to the
    pre-update parameter alongside the bias-corrected moment step.
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        decayed = p - lr * state.weight_decay * p
        out[name] = (decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return out, state


class AdamW:
    """Stateful wrapper applying ``adamw_step`` to a module's parameters."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = dict(named_params)
        self.state = OptimizerState(lr, tuple(betas), eps, weight_decay)

    def step(self, lr: float | None = None) -> None:
        values = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        new, _ = adamw_step(values, grads, self.state, lr)
        for n, p in self.params.items():
            p.data = new[n]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
