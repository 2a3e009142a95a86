"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                    floor: float = 1e-8) -> dict[int, float]:
    """Compare tape gradients with finite differences for every tensor in ``params``.

    ``loss_fn`` must build its graph from ``params`` each call. Returns the max
    relative error per parameter index.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return float(loss_fn().data)

    return {i: relative_error(analytic[i], numerical_grad(value, p, h), floor)
            for i, p in enumerate(params)}
