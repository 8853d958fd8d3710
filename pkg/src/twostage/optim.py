"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.exp_avg.clear()
        self.exp_avg_sq.clear()


def adamw_step(params, state: OptimizerState) -> None:
    """One in-place AdamW update over ``params``.

    ``params`` is any iterable of ``(name, Tensor)`` pairs (a ParamSet works).
    Every tensor must carry a gradient; tensors outside ``params`` are not touched.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params:
        g = p.grad
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    """Thin stateful wrapper pairing a parameter list with its OptimizerState."""

    def __init__(self, params, lr=2e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params: list[tuple[str, Tensor]] = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, self.state)
