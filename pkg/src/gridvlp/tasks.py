"""MLM / ITM / QA objectives: input corruption, task heads and losses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .fusion import FusedSequence
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor
from .text import CLS, MASK, PAD, RESERVED, SEP, TokenSequence

IGNORE = -100


@dataclass
class PretrainBatch:
    ids: np.ndarray            # (B, Lt) token ids
    text_mask: np.ndarray      # (B, Lt) valid text positions
    grid_feats: np.ndarray     # (B, n, C) flattened grid features
    grid_mask: np.ndarray      # (B, n) valid grid positions
    grid_cells: np.ndarray     # (B, n, 2) source (row, col) of each grid token
    itm_labels: np.ndarray     # (B,) 1 aligned, 0 corrupted, IGNORE for QA samples
    mlm_labels: np.ndarray     # (B, Lt) original id at masked positions, else IGNORE
    qa_labels: np.ndarray      # (B,) answer id, IGNORE for caption samples
    is_qa: np.ndarray          # (B,)

    def __len__(self) -> int:
        return len(self.ids)

    def replace(self, **changes) -> "PretrainBatch":
        return dataclasses.replace(self, **changes)


def mask_tokens(ids: np.ndarray, valid: np.ndarray, vocab_size: int, rng: np.random.Generator,
                mask_prob: float = 0.15, mask_frac: float = 0.8, random_frac: float = 0.1,
                eligible: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style masking over any-shaped id arrays; returns (masked ids, labels)."""
    ids = np.asarray(ids)
    candidates = valid & (ids != CLS) & (ids != SEP) & (ids != PAD)
    if eligible is not None:
        candidates &= eligible
    selected = candidates & (rng.random(ids.shape) < mask_prob)
    branch = rng.random(ids.shape)
    random_ids = rng.integers(len(RESERVED), vocab_size, size=ids.shape) \
        if vocab_size > len(RESERVED) else np.full(ids.shape, MASK)
    out = ids.copy()
    to_mask = selected & (branch < mask_frac)
    to_random = selected & (branch >= mask_frac) & (branch < mask_frac + random_frac)
    out[to_mask] = MASK
    out[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE)
    return out, labels


def apply_mlm_masking(tokens: TokenSequence, vocab_size: int, rng: np.random.Generator,
                      mask_prob: float = 0.15, mask_frac: float = 0.8,
                      random_frac: float = 0.1) -> tuple[TokenSequence, np.ndarray]:
    ids, labels = mask_tokens(tokens.ids, tokens.valid, vocab_size, rng, mask_prob,
                              mask_frac, random_frac)
    return TokenSequence(ids, tokens.valid.copy()), labels


def itm_corrupt(batch: PretrainBatch, rng: np.random.Generator,
                corrupt_prob: float = 0.5) -> PretrainBatch:
    """Swap captions between caption samples to build mismatched pairs.

    Each caption sample is corrupted with ``corrupt_prob``, taking the caption
    of a uniformly chosen other caption sample whose text differs from its own
    (so a negative is never accidentally correct). QA samples are untouched.
    """
    n = len(batch)
    if n < 2 and corrupt_prob > 0:
        raise ValueError("ITM corruption needs a batch of at least 2 samples")
    ids = batch.ids.copy()
    text_mask = batch.text_mask.copy()
    itm = np.where(batch.is_qa, IGNORE, 1)
    mlm = batch.mlm_labels.copy()
    captions = np.nonzero(~batch.is_qa)[0]
    flips = rng.random(n) < corrupt_prob
    for i in captions:
        if not flips[i]:
            continue
        others = [j for j in captions
                  if j != i and not np.array_equal(batch.ids[j], batch.ids[i])]
        if not others:
            continue
        j = others[rng.integers(len(others))]
        ids[i] = batch.ids[j]
        text_mask[i] = batch.text_mask[j]
        itm[i] = 0
        mlm[i] = IGNORE
    return batch.replace(ids=ids, text_mask=text_mask, itm_labels=itm, mlm_labels=mlm)


class MlmHead(Module):
    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator, tied: bool = True):
        self.transform = Linear(d, d, rng)
        self.norm = LayerNorm(d)
        self.decoder = None if tied else Linear(d, vocab_size, rng, bias=False)
        self.bias = param(np.zeros(vocab_size))

    def __call__(self, h: Tensor, token_table: Optional[Tensor] = None) -> Tensor:
        h = self.norm(T.gelu(self.transform(h)))
        if self.decoder is None:
            logits = T.matmul(h, T.transpose(token_table, (1, 0)))
        else:
            logits = self.decoder(h)
        return T.add(logits, self.bias)


class QaHead(Module):
    def __init__(self, d: int, num_answers: int, rng: np.random.Generator):
        self.fc1 = Linear(d, 2 * d, rng)
        self.norm = LayerNorm(2 * d)
        self.fc2 = Linear(2 * d, num_answers, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(self.norm(T.gelu(self.fc1(h))))


class TaskHeads(Module):
    def __init__(self, d: int, vocab_size: int, num_answers: int, rng: np.random.Generator,
                 tie_mlm: bool = True):
        self.mlm = MlmHead(d, vocab_size, rng, tied=tie_mlm)
        self.itm = Linear(d, 2, rng)
        self.qa = QaHead(d, num_answers, rng)


class TaskLosses(NamedTuple):
    mlm: Tensor
    itm: Tensor
    qa: Tensor
    total: Tensor


class TaskOutputs(NamedTuple):
    mlm_logits: Tensor
    mlm_targets: np.ndarray
    itm_logits: Tensor
    qa_logits: Tensor


def masked_positions(mlm_labels: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    b, t = np.nonzero(mlm_labels != IGNORE)
    return b * seq_len + t, mlm_labels[b, t]


def task_outputs(encoded: FusedSequence, heads: TaskHeads, batch: PretrainBatch,
                 token_table: Optional[Tensor] = None) -> TaskOutputs:
    states = encoded.states
    B, L, d = states.shape
    flat = T.reshape(states, (B * L, d))
    rows, targets = masked_positions(batch.mlm_labels, L)
    mlm_logits = heads.mlm(T.take(flat, rows, axis=0), token_table)
    cls = T.take(states, 0, axis=1)
    return TaskOutputs(mlm_logits, targets, heads.itm(cls), heads.qa(cls))


def task_losses(encoded: FusedSequence, heads: TaskHeads, batch: PretrainBatch,
                token_table: Optional[Tensor] = None,
                outputs: Optional[TaskOutputs] = None) -> TaskLosses:
    """Unit-weighted sum of the three objectives; an objective with nothing to score is 0."""
    out = outputs if outputs is not None else task_outputs(encoded, heads, batch, token_table)
    l_mlm = T.softmax_cross_entropy(out.mlm_logits, out.mlm_targets, IGNORE)
    l_itm = T.softmax_cross_entropy(out.itm_logits, batch.itm_labels, IGNORE)
    l_qa = T.softmax_cross_entropy(out.qa_logits, batch.qa_labels, IGNORE)
    return TaskLosses(l_mlm, l_itm, l_qa, T.add(T.add(l_mlm, l_itm), l_qa))
