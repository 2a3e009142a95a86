"""Single-stream fusion: text then grid tokens through post-LN Transformer layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor
from .vision import GridTokenSequence


@dataclass
class FusionConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    ff_mult: int = 4
    max_text_len: int = 20
    grid_sample_k: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.grid_sample_k < 1:
            raise ValueError("grid_sample_k must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


def sample_grid_indices(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform k-subset of range(n); all of range(n) when n <= k."""
    if n < 1:
        raise ValueError("empty grid sequence")
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def random_grid_sample(grids: GridTokenSequence, k: int, rng: np.random.Generator) -> GridTokenSequence:
    idx = sample_grid_indices(len(grids), k, rng)
    return GridTokenSequence(T.take(grids.tokens, idx, axis=-2), grids.cells[idx])


@dataclass
class FusedSequence:
    states: Tensor
    mask: np.ndarray
    boundary: int


def build_input_sequence(text: Tensor, grids, text_mask=None, grid_mask=None) -> FusedSequence:
    """Concatenate [CLS, tokens, SEP, (PAD), grids] along the sequence axis.

    ``text`` and ``grids`` are (..., L, d); masks default to all-valid.
    """
    g = grids.tokens if isinstance(grids, GridTokenSequence) else grids
    if text.shape[-1] != g.shape[-1]:
        raise T.ShapeError(f"text width {text.shape[-1]} != grid width {g.shape[-1]}")
    lt, lg = text.shape[-2], g.shape[-2]
    if text_mask is None:
        text_mask = np.ones(text.shape[:-1], dtype=bool)
    if grid_mask is None:
        grid_mask = np.ones(g.shape[:-1], dtype=bool)
    mask = np.concatenate([np.asarray(text_mask, bool), np.asarray(grid_mask, bool)], axis=-1)
    states = T.concat([text, g], axis=-2)
    if mask.shape[-1] != lt + lg:
        raise T.ShapeError("mask length does not match sequence length")
    return FusedSequence(states, mask, lt)


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, dropout: float, rng: np.random.Generator):
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)
        self.norm2 = LayerNorm(d)
        self.heads = heads
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        p = self.dropout if self.training else 0.0
        a = T.multi_head_attention(self.q(x), self.k(x), self.v(x), self.heads, mask,
                                   dropout_p=p, rng=rng, training=self.training)
        h = self.norm1(T.add(x, T.dropout(self.o(a), p, rng, self.training)))
        f = self.ff2(T.gelu(self.ff1(h)))
        return self.norm2(T.add(h, T.dropout(f, p, rng, self.training)))


class FusionEncoder(Module):
    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        self.config = config
        d = config.width
        self.blocks = [EncoderLayer(d, config.heads, config.ff_mult * d, config.dropout, rng)
                       for _ in range(config.layers)]

    def __call__(self, seq: FusedSequence, rng: Optional[np.random.Generator] = None) -> FusedSequence:
        x = seq.states
        for block in self.blocks:
            x = block(x, seq.mask, rng)
        return FusedSequence(x, seq.mask, seq.boundary)


def encode(seq: FusedSequence, encoder: FusionEncoder, rng=None) -> FusedSequence:
    return encoder(seq, rng)
