"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tevit.core.errors import ContractError
from tevit.core.tensor import Tensor


@dataclass
class AdamWState:
    learning_rate: float = 0.00025
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], state: AdamWState,
               lr_scale: Sequence[float] | None = None) -> AdamWState:
    """One in-place AdamW update.

    ``lr_scale`` optionally gives a per-parameter learning-rate multiplier
    (used for the reduced backbone rate).  Weight decay is scaled the same way
    since it is applied as ``lr * wd * p``.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros(p.shape) for p in params]
        state.second_moment = [np.zeros(p.shape) for p in params]
    if len(state.first_moment) != len(params):
        raise ContractError("AdamW state was built for a different parameter list")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = state.learning_rate * (1.0 if lr_scale is None else lr_scale[i])
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    sq = 0.0
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient")
        sq += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad = p.grad * scale
    return scale


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
