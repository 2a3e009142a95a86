"""Parameter containers and the handful of layers the model needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters()
                if p.requires_grad and not isinstance(p, Buffer)]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag and not isinstance(p, Buffer)
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing tensors: {missing[:5]}")
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected tensor {name!r}")
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise T.ShapeError(f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} "
                                   f"!= model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


class Parameter(Tensor):
    """A tensor owned by a module; picked up by ``named_parameters``."""

    __slots__ = ()


class Buffer(Parameter):
    """Saved with the module but never trained."""

    __slots__ = ()


def param(data, dtype=T.DEFAULT_DTYPE) -> Parameter:
    return Parameter(np.asarray(data, dtype=dtype), requires_grad=True)


def buffer(data, dtype=T.DEFAULT_DTYPE) -> Buffer:
    return Buffer(np.asarray(data, dtype=dtype), requires_grad=False)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02,
                 bias: bool = True):
        self.weight = param(rng.normal(0.0, std, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(rng.normal(0.0, std, (n, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = param(rng.normal(0.0, std, (c_out, c_in, k, k)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        shape = (-1, 1, 1) if y.ndim == 3 else (1, -1, 1, 1)
        return T.add(y, T.reshape(self.bias, shape))
