"""SGD with momentum and Adam, as in-place parameter updates.

Both steps are deterministic functions of (params, grads, state); optimizer
state carries the per-parameter moment buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def _check_aligned(params: Sequence[Tensor], grads: Sequence[np.ndarray], name: str) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{name}: {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ShapeError(f"{name}: grad {i} is missing (run backward first)")
        if p.data.shape != np.shape(g):
            raise ShapeError(f"{name}: param {i} shape {p.data.shape} vs grad shape {np.shape(g)}")


@dataclass
class SgdState:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: Optional[List[np.ndarray]] = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdState) -> None:
    """v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v."""
    _check_aligned(params, grads, "sgd_step")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= state.learning_rate * v


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Optional[List[np.ndarray]] = None
    second_moment: Optional[List[np.ndarray]] = None


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam update; step_count advances by one per call."""
    _check_aligned(params, grads, "adam_step")
    if state.first_moment is None:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
