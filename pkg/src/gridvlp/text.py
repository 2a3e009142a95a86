"""Whole-word vocabulary, tokenization and sentence embeddings."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Embedding, LayerNorm, Module, param
from .tensor import Tensor

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
MAX_TEXT_LEN = 20

_WORD = re.compile(r"[^\W_]+")


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def words(self) -> list[str]:
        return self.tokens[len(RESERVED):]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, i = line.rsplit("\t", 1)
                pairs.append((int(i), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([tok for _, tok in pairs])


def build_vocab(corpus: Iterable[str], max_size: int = 30000) -> Vocabulary:
    """Most frequent words first, ties broken alphabetically."""
    counts: Counter = Counter()
    n = 0
    for sentence in corpus:
        counts.update(split_words(sentence))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise ValueError(f"max_size must be at least {len(RESERVED)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[:max_size - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + words)


@dataclass
class TokenSequence:
    ids: np.ndarray
    valid: np.ndarray

    @property
    def length(self) -> int:
        return int(self.valid.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenSequence) and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.valid, other.valid))


def tokenize(text: str, vocab: Vocabulary, max_text_len: int = MAX_TEXT_LEN) -> TokenSequence:
    words = split_words(text)[:max_text_len]
    ids = np.full(max_text_len + 2, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1:len(words) + 1] = [vocab.id(w) for w in words]
    ids[len(words) + 1] = SEP
    valid = np.zeros(max_text_len + 2, dtype=bool)
    valid[:len(words) + 2] = True
    return TokenSequence(ids, valid)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary,
                   max_text_len: int = MAX_TEXT_LEN) -> tuple[np.ndarray, np.ndarray]:
    seqs = [tokenize(t, vocab, max_text_len) for t in texts]
    return np.stack([s.ids for s in seqs]), np.stack([s.valid for s in seqs])


class TextEmbeddings(Module):
    """token + position + text modal-type embedding, then layer norm."""

    def __init__(self, vocab_size: int, d: int, max_text_len: int, rng: np.random.Generator):
        self.token = Embedding(vocab_size, d, rng)
        self.position = Embedding(max_text_len + 2, d, rng)
        self.modal = param(rng.normal(0.0, 0.02, d))
        self.norm = LayerNorm(d)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        L = ids.shape[-1]
        if L > self.position.weight.shape[0]:
            raise T.ShapeError(f"sequence of {L} tokens exceeds position table")
        x = T.add(self.token(ids), self.position(np.arange(L)))
        x = T.add(x, self.modal)
        return self.norm(x)


def embed_sentence(tokens: TokenSequence, tables: TextEmbeddings) -> Tensor:
    return tables(tokens.ids)
