"""AdamW with decoupled weight decay and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor

ONECYCLE_PCT_START = 0.3
ONECYCLE_DIV_FACTOR = 25.0
ONECYCLE_FINAL_DIV = 1e4


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Sequence[Tensor | np.ndarray]) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else p for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adamw_step(params: Sequence[Tensor | np.ndarray], grads: Sequence[np.ndarray | None],
               state: AdamState, lr: float, weight_decay: float = 1e-2,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay_mask: Sequence[bool] | None = None) -> None:
    """Update ``params`` in place.

    Weight decay is decoupled: each parameter is first shrunk by
    ``lr * weight_decay`` and then moved by the bias-corrected Adam direction.
    ``decay_mask`` switches decay off for selected parameters.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adamw_step: params, grads and state disagree in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {arr.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and (decay_mask is None or decay_mask[i]):
            arr *= 1.0 - lr * weight_decay
        arr -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(arr.dtype, copy=False)


@dataclass
class AdamW:
    """Convenience wrapper pairing a parameter list with its Adam state."""

    params: list[Tensor]
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decay_mask: list[bool] | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.init(self.params)
        if self.decay_mask is None:
            # biases and scalars are not decayed
            self.decay_mask = [p.ndim >= 2 for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr,
                   self.weight_decay, self.betas, self.eps, self.decay_mask)


def onecycle_lr(step: int, total_steps: int, max_lr: float,
                pct_start: float = ONECYCLE_PCT_START,
                div_factor: float = ONECYCLE_DIV_FACTOR,
                final_div: float = ONECYCLE_FINAL_DIV) -> float:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to max_lr/final_div."""
    if not 0 <= step < total_steps:
        raise ValueError(f"onecycle_lr: step {step} outside [0, {total_steps})")
    initial = max_lr / div_factor
    final = max_lr / final_div
    peak = int(round(pct_start * total_steps))
    last = total_steps - 1
    peak = min(peak, last)
    if step <= peak:
        if peak == 0:
            return max_lr
        frac = step / peak
        return initial + (max_lr - initial) * (1.0 - math.cos(math.pi * frac)) / 2.0
    frac = (step - peak) / (last - peak)
    return final + (max_lr - final) * (1.0 + math.cos(math.pi * frac)) / 2.0
