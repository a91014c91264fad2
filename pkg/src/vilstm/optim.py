"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.05,
               eps: float = 1e-8, decay_mask: Sequence[bool] | None = None) -> AdamWState:
    """Update ``params`` in place by one AdamW step and return the advanced state.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the Adam update,
    and only applies where ``decay_mask`` is true (all params by default).
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} vs grad shape {g.shape}")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p) for p in params]
        state.exp_avg_sq = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    mask = decay_mask if decay_mask is not None else [True] * len(params)
    for p, g, m, v, decay in zip(params, grads, state.exp_avg, state.exp_avg_sq, mask):
        if decay and weight_decay:
            p *= 1 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return state


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a fixed list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 weight_decay: float = 0.05, eps: float = 1e-8, decay_mask: Sequence[bool] | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.decay_mask = list(decay_mask) if decay_mask is not None else None
        self.state = AdamWState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, self.lr, self.betas,
                   self.weight_decay, self.eps, self.decay_mask)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.data.dtype, copy=False)
    return norm
