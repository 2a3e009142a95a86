"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               decay_mask: Optional[Sequence[bool]] = None) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"shape mismatch at parameter {i}: {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decay_mask is None or decay_mask[i]:
            update = update + state.weight_decay * p
        p -= (state.lr * update).astype(p.dtype, copy=False)


class AdamW:
    """Optimizer over named parameter tensors.

    Weight decay applies to tensors of rank >= 2 only (matrices, embedding
    tables, kernels); biases and layer-norm vectors are left undecayed.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = [n for n, _ in named_params]
        self.params: list[Tensor] = [p for _, p in named_params]
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
        self.decay_mask = [p.ndim >= 2 for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, self.decay_mask)

    def state_tensors(self) -> dict:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_tensors(self, tensors: dict, t: int) -> None:
        self.state.m = [np.array(tensors[f"m.{n}"]) for n in self.names]
        self.state.v = [np.array(tensors[f"v.{n}"]) for n in self.names]
        self.state.t = t


def scheduled_lr(step: int, base: float, warmup: int, total: int, schedule: str = "constant") -> float:
    """Linear warmup over ``warmup`` steps, then constant or linear decay to zero at ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "linear":
        return base * max(0.0, (total - step) / max(1, total - warmup))
    return base
