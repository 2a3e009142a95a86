"""The full grid-feature vision-language model: embeddings, fusion encoder, task heads."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .fusion import FusionConfig, FusionEncoder, FusedSequence, build_input_sequence, sample_grid_indices
from .nn import Module
from .tasks import PretrainBatch, QaHead, TaskHeads, TaskLosses, TaskOutputs, task_losses, task_outputs
from .text import TextEmbeddings
from .vision import GridProjector


class GridVLP(Module):
    def __init__(self, vocab_size: int, num_answers: int, grid_channels: int,
                 config: FusionConfig, seed: int = 0, grid_pos_emb: bool = False,
                 tie_mlm: bool = True):
        rng = np.random.default_rng([seed, 101])
        self.config = config
        self.tie_mlm = tie_mlm
        self.text = TextEmbeddings(vocab_size, config.width, config.max_text_len, rng)
        self.grid = GridProjector(grid_channels, config.width, rng, positional=grid_pos_emb)
        self.encoder = FusionEncoder(config, rng)
        self.heads = TaskHeads(config.width, vocab_size, num_answers, rng, tie_mlm=tie_mlm)

    def fuse(self, batch: PretrainBatch, rng: Optional[np.random.Generator] = None) -> FusedSequence:
        text = self.text(batch.ids)
        cells = batch.grid_cells if self.grid.positional else None
        grids = self.grid(batch.grid_feats, cells)
        seq = build_input_sequence(text, grids, batch.text_mask, batch.grid_mask)
        return self.encoder(seq, rng)

    def outputs(self, batch: PretrainBatch, rng=None) -> TaskOutputs:
        encoded = self.fuse(batch, rng)
        table = self.text.token.weight if self.tie_mlm else None
        return task_outputs(encoded, self.heads, batch, table)

    def losses(self, batch: PretrainBatch, rng=None) -> TaskLosses:
        out = self.outputs(batch, rng)
        return task_losses(None, self.heads, batch, outputs=out)

    def reset_qa_head(self, seed: int) -> None:
        rng = np.random.default_rng([seed, 202])
        n_answers = self.heads.qa.fc2.weight.shape[1]
        self.heads.qa = QaHead(self.config.width, n_answers, rng)
        self.heads.qa.astype(self.text.modal.dtype)


def sample_batch_grids(feats: np.ndarray, mask: np.ndarray, cells: np.ndarray, k: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Independent random k-subset of each sample's valid grids, re-padded.

    Valid grids sit at the front of each row; padding follows.
    """
    B, _, C = feats.shape
    picks = [sample_grid_indices(int(mask[b].sum()), k, rng) for b in range(B)]
    n = max(len(p) for p in picks)
    out = np.zeros((B, n, C), dtype=feats.dtype)
    out_mask = np.zeros((B, n), dtype=bool)
    out_cells = np.zeros((B, n, 2), dtype=cells.dtype)
    for b, p in enumerate(picks):
        out[b, :len(p)] = feats[b, p]
        out_mask[b, :len(p)] = True
        out_cells[b, :len(p)] = cells[b, p]
    return out, out_mask, out_cells
