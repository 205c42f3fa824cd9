"""Adam with a cosine learning-rate schedule.

The schedule is lr(t) = base_lr * 0.5 * (1 + cos(pi * t / total_steps)):
exactly base_lr at t=0 and exactly 0 at t=total_steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    base_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-parameter learning-rate multipliers (1.0 = plain Adam)
    lr_mults: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, params: list[Tensor], base_lr: float, total_steps: int,
             lr_mults: list[float] | None = None) -> "AdamState":
        if lr_mults is None:
            lr_mults = [1.0] * len(params)
        if len(lr_mults) != len(params):
            raise ShapeError("AdamState: lr_mults length must match params")
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step=0,
            base_lr=base_lr,
            total_steps=total_steps,
            lr_mults=list(lr_mults),
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> list[Tensor]:
    """One in-place Adam update; returns the (mutated) params for convenience."""
    if state.step >= state.total_steps:
        raise ShapeError(
            f"adam_step: step {state.step} >= total_steps {state.total_steps}"
        )
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state length mismatch")
    lr = cosine_lr(state.base_lr, state.step, state.total_steps)
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data = p.data - (lr * state.lr_mults[i]) * mhat / (np.sqrt(vhat) + state.eps)
    state.step += 1
    return params


class Adam:
    """Convenience wrapper: reads .grad off the params at each step."""

    def __init__(self, params: list[Tensor], base_lr: float, total_steps: int,
                 lr_mults: list[float] | None = None):
        self.params = params
        self.state = AdamState.init(params, base_lr, total_steps, lr_mults)

    @property
    def lr(self) -> float:
        return cosine_lr(self.state.base_lr, self.state.step, self.state.total_steps)

    def step(self) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adam_step(self.params, grads, self.state)
