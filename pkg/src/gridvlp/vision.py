"""Image resizing, the stride-32 CNN grid encoder, and grid-token projection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import NUM_CELL_CLASSES
from .nn import Conv2d, Embedding, Linear, Module, buffer, param
from .optim import AdamW
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STRIDE = 32


def resized_shape(h: int, w: int, shorter: int, longer_cap: int) -> tuple[int, int]:
    """Scale so the short side hits ``shorter`` unless that pushes the long side past the cap."""
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate image {h}x{w}")
    if shorter <= 0 or longer_cap <= 0 or shorter > longer_cap:
        raise ValueError(f"bad resize targets shorter={shorter} longer_cap={longer_cap}")
    scale = shorter / min(h, w)
    if max(h, w) * scale > longer_cap:
        scale = longer_cap / max(h, w)
    return int(round(h * scale)), int(round(w * scale))


def padded_shape(h: int, w: int) -> tuple[int, int]:
    return -(-h // STRIDE) * STRIDE, -(-w // STRIDE) * STRIDE


def bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of a (C, H, W) array."""
    _, h, w = img.shape
    if (oh, ow) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, wy = coords(oh, h)
    x0, x1, wx = coords(ow, w)
    rows = img[:, y0] * (1 - wy)[None, :, None] + img[:, y1] * wy[None, :, None]
    return rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx


def resize_image(img: np.ndarray, shorter: int = 64, longer_cap: int = 96,
                 pad: bool = True) -> np.ndarray:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    oh, ow = resized_shape(img.shape[1], img.shape[2], shorter, longer_cap)
    out = bilinear_resize(img, oh, ow)
    if pad:
        ph, pw = padded_shape(oh, ow)
        out = np.pad(out, ((0, 0), (0, ph - oh), (0, pw - ow)))
    return out


class CnnEncoder(Module):
    """Five stride-2 3x3 conv stages with ReLU; total stride 32.

    ``blocks_per_stage`` adds stride-1 convs inside each stage, giving deeper
    backbones with the same output geometry.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 96, 128), rng=None,
                 blocks_per_stage: int = 1):
        if len(channels) != 5:
            raise ValueError("need exactly 5 stages for a total stride of 32")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = tuple(int(c) for c in channels)
        self.blocks_per_stage = blocks_per_stage
        self.layers = []
        c_in = 3
        for c in self.channels:
            self.layers.append(Conv2d(c_in, c, 3, rng, stride=2, pad=1))
            for _ in range(blocks_per_stage - 1):
                self.layers.append(Conv2d(c, c, 3, rng, stride=1, pad=1))
            c_in = c
        self.frozen = False

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def freeze(self) -> "CnnEncoder":
        self.requires_grad_(False)
        self.frozen = True
        return self

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = T.sub(x, 0.5)
        for conv in self.layers:
            h = T.relu(conv(h))
        return h


def encode_grid(img: np.ndarray, cnn: CnnEncoder) -> np.ndarray:
    """(3, H0, W0) or (B, 3, H0, W0) image -> C x H0/32 x W0/32 activation map."""
    if img.shape[-1] % STRIDE or img.shape[-2] % STRIDE:
        raise ValueError(f"image dims {img.shape[-2:]} are not multiples of {STRIDE}")
    return cnn(np.asarray(img, dtype=cnn.layers[0].weight.dtype)).data


@dataclass
class GridTokenSequence:
    tokens: Tensor
    cells: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[-2]


def flatten_grid(fmap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major collapse (..., C, H, W) -> (..., H*W, C) plus each token's (row, col)."""
    *lead, c, h, w = fmap.shape
    flat = np.moveaxis(fmap.reshape(*lead, c, h * w), -1, -2)
    cells = np.stack(np.divmod(np.arange(h * w), w), axis=1)
    return flat, cells


class GridProjector(Module):
    """Linear C -> d projection plus the visual modal-type embedding.

    Features are first shifted and scaled by fixed statistics of the training
    grids (identity until ``set_normalization`` is called). With ``positional``
    set, learned row and column embeddings are added too; it is off by default.
    """

    def __init__(self, c: int, d: int, rng: np.random.Generator, positional: bool = False,
                 max_cells: int = 64):
        self.shift = buffer(np.zeros(c))
        self.scale = buffer(np.ones(1))
        self.proj = Linear(c, d, rng)
        self.modal = param(rng.normal(0.0, 0.02, d))
        self.positional = positional
        if positional:
            self.row = Embedding(max_cells, d, rng)
            self.col = Embedding(max_cells, d, rng)

    def __call__(self, feats, cells: Optional[np.ndarray] = None) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats, dtype=self.modal.dtype)
        if feats.shape[-1] != self.proj.weight.shape[0]:
            raise T.ShapeError(f"grid features have {feats.shape[-1]} channels, "
                               f"projection expects {self.proj.weight.shape[0]}")
        feats = T.mul(T.sub(feats, self.shift), self.scale)
        g = T.add(self.proj(feats), self.modal)
        if self.positional:
            if cells is None:
                raise ValueError("positional grid embedding needs cell coordinates")
            g = T.add(g, T.add(self.row(cells[..., 0]), self.col(cells[..., 1])))
        return g

    def set_normalization(self, feats: np.ndarray) -> None:
        """Centre each channel and divide by the global std, over a (N, C) sample of grids."""
        feats = np.asarray(feats, dtype=np.float64).reshape(-1, self.shift.shape[0])
        centred = feats - feats.mean(axis=0)
        self.shift.data = feats.mean(axis=0).astype(self.shift.dtype)
        self.scale.data = np.array([1.0 / max(centred.std(), 1e-6)], dtype=self.scale.dtype)


def flatten_and_project(fmap, projector: GridProjector) -> GridTokenSequence:
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    if data.ndim != 3:
        raise T.ShapeError("expected a single (C, H, W) feature map")
    if isinstance(fmap, Tensor):
        c, h, w = fmap.shape
        flat = T.transpose(T.reshape(fmap, (c, h * w)), (1, 0))
        cells = np.stack(np.divmod(np.arange(h * w), w), axis=1)
    else:
        flat, cells = flatten_grid(data)
    return GridTokenSequence(projector(flat, cells), cells)


class CellClassifierHead(Module):
    """Pre-training head: 1x1 pool over each cell, then two fully-connected layers.

    A box covering exactly one cell pools to that cell's feature vector, so the
    per-cell 1x1 pooling reduces to reading the feature map directly.
    """

    def __init__(self, c: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.fc1 = Linear(c, hidden, rng, std=np.sqrt(2.0 / c))
        self.fc2 = Linear(hidden, n_classes, rng, std=np.sqrt(1.0 / hidden))

    def __call__(self, fmap: Tensor) -> Tensor:
        b, c, h, w = fmap.shape
        cells = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b * h * w, c))
        return self.fc2(T.relu(self.fc1(cells)))


def cell_accuracy(cnn: CnnEncoder, head: CellClassifierHead, images: np.ndarray,
                  labels: np.ndarray, batch_size: int = 64) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        logits = head(cnn(images[i:i + batch_size])).data
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size].reshape(-1)).sum())
    return correct / labels.size


def pretrain_cnn_classifier(images: np.ndarray, labels: np.ndarray, cnn: CnnEncoder,
                            epochs: int = 10, batch_size: int = 32, lr: float = 1e-3,
                            hidden: int = 128, seed: int = 0,
                            on_epoch: Optional[Callable[[int, float], None]] = None
                            ) -> CellClassifierHead:
    """Train ``cnn`` as a per-cell classifier, then freeze it. Returns the (discardable) head."""
    n = len(images)
    rows, cols = images.shape[2] // STRIDE, images.shape[3] // STRIDE
    if labels.shape != (n, rows, cols):
        raise T.ShapeError(f"label grid {labels.shape[1:]} does not match feature map {(rows, cols)}")
    rng = np.random.default_rng([seed, 17])
    head = CellClassifierHead(cnn.out_channels, hidden, NUM_CELL_CLASSES, rng)
    opt = AdamW(cnn.trainable() + head.trainable(), lr=lr)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 18, epoch]).permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = T.softmax_cross_entropy(head(cnn(images[idx])), labels[idx].reshape(-1))
                tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        if on_epoch is not None:
            on_epoch(epoch, total / n)
        log.info("cnn epoch %d loss %.4f", epoch, total / n)
    cnn.freeze()
    return head

