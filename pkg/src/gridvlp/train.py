"""Data generation, CNN pre-training, fusion pre-training, fine-tuning and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ANSWERS, DatasetError, Record, generate_split, read_dataset, write_dataset
from .model import GridVLP, sample_batch_grids
from .optim import AdamW, scheduled_lr
from .tasks import IGNORE, PretrainBatch, itm_corrupt, mask_tokens
from .tensor import NonFiniteError, Tape
from .text import Vocabulary, build_vocab, tokenize_batch
from .vision import CnnEncoder, cell_accuracy, encode_grid, flatten_grid, pretrain_cnn_classifier, resize_image

log = logging.getLogger(__name__)

CNN_PREFIX = "cnn."


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def gen_data(config: RunConfig) -> dict:
    sizes = {"train": config.n_train, "val": config.n_val,
             "cnn": config.n_cnn, "cnn_val": config.n_cnn_val}
    for split, n in sizes.items():
        records = generate_split(config.seed, split, n, config.image_h, config.image_w)
        write_dataset(records, config.data_dir, split)
        log.info("wrote %d %s records to %s", n, split, config.data_dir)
    return sizes


def corpus_vocab(records: Sequence[Record]) -> Vocabulary:
    return build_vocab([r.text for r in records])


@dataclass
class EncodedSplit:
    """A dataset split with tokenized text and cached (frozen) grid features."""

    record_ids: list
    ids: np.ndarray
    valid: np.ndarray
    feats: np.ndarray
    grid_mask: np.ndarray
    cells: np.ndarray
    is_qa: np.ndarray
    qa_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> PretrainBatch:
        idx = np.asarray(idx)
        is_qa = self.is_qa[idx]
        return PretrainBatch(
            ids=self.ids[idx].copy(), text_mask=self.valid[idx].copy(),
            grid_feats=self.feats[idx], grid_mask=self.grid_mask[idx], grid_cells=self.cells[idx],
            itm_labels=np.where(is_qa, IGNORE, 1), mlm_labels=np.full(self.ids[idx].shape, IGNORE),
            qa_labels=self.qa_labels[idx].copy(), is_qa=is_qa,
        )

    def select(self, keep: np.ndarray) -> "EncodedSplit":
        keep = np.asarray(keep)
        return EncodedSplit([self.record_ids[i] for i in np.nonzero(keep)[0]], self.ids[keep],
                            self.valid[keep], self.feats[keep], self.grid_mask[keep],
                            self.cells[keep], self.is_qa[keep], self.qa_labels[keep])


def grid_features(images: Sequence[np.ndarray], cnn: CnnEncoder, config: RunConfig,
                  chunk: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resize, encode and flatten every image; pads to the longest grid sequence."""
    resized = [resize_image(img, config.resize_shorter, config.resize_longer) for img in images]
    flat, cells = [None] * len(resized), [None] * len(resized)
    by_shape: dict = {}
    for i, img in enumerate(resized):
        by_shape.setdefault(img.shape, []).append(i)
    for shape, members in by_shape.items():
        for s in range(0, len(members), chunk):
            part = members[s:s + chunk]
            fmap = encode_grid(np.stack([resized[i] for i in part]), cnn)
            f, c = flatten_grid(fmap)
            for j, i in enumerate(part):
                flat[i], cells[i] = f[j], c
    n = max(len(f) for f in flat)
    C = flat[0].shape[-1]
    feats = np.zeros((len(flat), n, C), dtype=flat[0].dtype)
    mask = np.zeros((len(flat), n), dtype=bool)
    cell_arr = np.zeros((len(flat), n, 2), dtype=np.int64)
    for i, (f, c) in enumerate(zip(flat, cells)):
        feats[i, :len(f)] = f
        mask[i, :len(f)] = True
        cell_arr[i, :len(f)] = c
    return feats, mask, cell_arr


def encode_split(records: Sequence[Record], vocab: Vocabulary, cnn: CnnEncoder,
                 config: RunConfig) -> EncodedSplit:
    ids, valid = tokenize_batch([r.text for r in records], vocab, config.max_text_len)
    feats, mask, cells = grid_features([r.image for r in records], cnn, config)
    is_qa = np.array([r.type == "qa" for r in records])
    qa = np.array([ANSWERS.index(r.answer) if r.type == "qa" else IGNORE for r in records])
    return EncodedSplit([r.id for r in records], ids, valid, feats, mask, cells, is_qa, qa)


# ---------------------------------------------------------------------------
# grid encoder pre-training
# ---------------------------------------------------------------------------

def build_cnn(config: RunConfig, seed: Optional[int] = None) -> CnnEncoder:
    rng = np.random.default_rng([config.seed if seed is None else seed, 11])
    return CnnEncoder(config.channels(), rng, blocks_per_stage=config.cnn_blocks)


def _cell_arrays(records: Sequence[Record], config: RunConfig):
    images = np.stack([resize_image(r.image, config.resize_shorter, config.resize_longer)
                       for r in records])
    labels = np.stack([np.asarray(r.cell_labels, dtype=np.int64) for r in records])
    return images, labels


def run_pretrain_cnn(config: RunConfig) -> dict:
    train = read_dataset(config.data_dir, "cnn")
    held = read_dataset(config.data_dir, "cnn_val")
    x, y = _cell_arrays(train, config)
    xv, yv = _cell_arrays(held, config)
    cnn = build_cnn(config)
    log_path = config.path("pretrain_cnn_log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as logf:
        def on_epoch(epoch, loss):
            logf.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")

        head = pretrain_cnn_classifier(x, y, cnn, epochs=config.cnn_epochs,
                                       batch_size=config.cnn_batch_size, lr=config.cnn_lr,
                                       hidden=config.cnn_hidden, seed=config.seed, on_epoch=on_epoch)
    metrics = {"train_cell_accuracy": cell_accuracy(cnn, head, x, y),
               "heldout_cell_accuracy": cell_accuracy(cnn, head, xv, yv)}
    save_checkpoint(config.cnn_path(), Checkpoint(
        config.to_dict(), cnn.state_dict(),
        meta={"kind": "cnn", "channels": list(cnn.channels), "blocks": cnn.blocks_per_stage,
              "metrics": metrics}))
    return metrics


def cnn_from_tensors(tensors: dict, channels, blocks: int) -> CnnEncoder:
    cnn = CnnEncoder(channels, np.random.default_rng(0), blocks_per_stage=blocks)
    cnn.load_state_dict(tensors)
    return cnn.freeze()


def load_cnn(path) -> CnnEncoder:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "cnn":
        raise CheckpointError(f"{path} is not a grid-encoder checkpoint")
    return cnn_from_tensors(ckpt.tensors, ckpt.meta["channels"], ckpt.meta["blocks"])


# ---------------------------------------------------------------------------
# fusion model
# ---------------------------------------------------------------------------

@dataclass
class Workspace:
    """Everything a fusion run needs, loaded once."""

    vocab: Vocabulary
    cnn: CnnEncoder
    train: EncodedSplit
    val: EncodedSplit


def prepare(config: RunConfig, cnn: Optional[CnnEncoder] = None,
            vocab: Optional[Vocabulary] = None) -> Workspace:
    if cnn is None:
        if not config.cnn_path().exists():
            raise CheckpointError(f"grid-encoder checkpoint {config.cnn_path()} missing; "
                                  "run pretrain-cnn first")
        cnn = load_cnn(config.cnn_path())
    train_records = read_dataset(config.data_dir, "train")
    val_records = read_dataset(config.data_dir, config.eval_split)
    vocab = vocab or corpus_vocab(train_records)
    return Workspace(vocab, cnn, encode_split(train_records, vocab, cnn, config),
                     encode_split(val_records, vocab, cnn, config))


def build_model(config: RunConfig, vocab: Vocabulary, cnn: CnnEncoder, seed: Optional[int] = None,
                train: Optional[EncodedSplit] = None) -> GridVLP:
    """Fresh model; ``train`` supplies the grid-feature normalisation statistics."""
    model = GridVLP(len(vocab), len(ANSWERS), cnn.out_channels, config.fusion(),
                    seed=config.seed if seed is None else seed,
                    grid_pos_emb=config.grid_pos_emb, tie_mlm=config.tie_mlm)
    if train is not None:
        model.grid.set_normalization(train.feats[train.grid_mask])
    return model


def make_optimizer(named, config: RunConfig, lr: float) -> AdamW:
    return AdamW(named, lr=lr, betas=(config.beta1, config.beta2), eps=config.adam_eps,
                 weight_decay=config.weight_decay)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Epoch-wise shuffled batches; the last partial batch of an epoch is dropped."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 5, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def step_rng(seed: int, step: int, stream: int = 7) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def make_pretrain_batch(split: EncodedSplit, idx, config: RunConfig, vocab_size: int,
                        rng: np.random.Generator, sampling: bool,
                        mask_qa: bool = False) -> PretrainBatch:
    """Sample grids, corrupt captions for ITM, then mask tokens for MLM.

    Every caption sample is masked, matched or not, so a [MASK] token says
    nothing about the ITM label; MLM targets are kept on matched captions only.
    Questions reach the QA head intact unless ``mask_qa`` is set.
    """
    batch = split.batch(idx)
    if sampling:
        feats, gmask, cells = sample_batch_grids(batch.grid_feats, batch.grid_mask, batch.grid_cells,
                                                 config.grid_sample_k, rng)
        batch = batch.replace(grid_feats=feats, grid_mask=gmask, grid_cells=cells)
    if len(batch) >= 2:
        batch = itm_corrupt(batch, rng, config.corrupt_prob)
    eligible = (~batch.is_qa | mask_qa)[:, None]
    ids, labels = mask_tokens(batch.ids, batch.text_mask, vocab_size, rng, config.mask_prob,
                              eligible=eligible)
    labels[batch.itm_labels == 0] = IGNORE
    return batch.replace(ids=ids, mlm_labels=labels)


def _losses_record(step: int, losses, batch: PretrainBatch) -> dict:
    return {"step": step, "loss_mlm": float(losses.mlm.data), "loss_itm": float(losses.itm.data),
            "loss_qa": float(losses.qa.data), "loss_total": float(losses.total.data),
            "grid_tokens": batch.grid_mask.sum(axis=1).tolist()}


def pretrain_loop(model: GridVLP, ws: Workspace, config: RunConfig, log_file=None,
                  steps: Optional[int] = None) -> tuple[list[dict], AdamW]:
    steps = config.steps if steps is None else steps
    opt = make_optimizer(model.trainable(), config, config.lr)
    sampling = config.sampling_enabled
    history = []
    model.train()
    for step in range(steps):
        opt.state.lr = scheduled_lr(step, config.lr, config.warmup_steps, steps, config.lr_schedule)
        rng = step_rng(config.seed, step)
        idx = batch_indices(len(ws.train), config.batch_size, step, config.seed)
        batch = make_pretrain_batch(ws.train, idx, config, len(ws.vocab), rng, sampling)
        opt.zero_grad()
        try:
            with Tape() as tape:
                losses = model.losses(batch, rng)
                tape.backward(losses.total)
            opt.step()
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step}: {e}") from None
        rec = _losses_record(step, losses, batch)
        history.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        if step % 100 == 0:
            log.info("step %d total %.4f mlm %.4f itm %.4f qa %.4f", step, rec["loss_total"],
                     rec["loss_mlm"], rec["loss_itm"], rec["loss_qa"])
    model.eval()
    return history, opt


def accuracy(pred: np.ndarray, labels: np.ndarray, ignore: int = IGNORE) -> float:
    keep = labels != ignore
    if not keep.any():
        return float("nan")
    return float((pred[keep] == labels[keep]).mean())


def evaluate(model: GridVLP, split: EncodedSplit, config: RunConfig, vocab_size: int,
             seed: Optional[int] = None) -> dict:
    """Deterministic full-grid evaluation of all three objectives."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([config.seed if seed is None else seed, 9])
    hits = {"itm": [0, 0], "mlm": [0, 0], "qa": [0, 0]}
    for start in range(0, len(split), config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, len(split)))
        masked = make_pretrain_batch(split, idx, config, vocab_size, rng, sampling=False)
        # ITM and QA are scored on the unmasked text, MLM on the masked copy
        clean = masked.replace(ids=np.where(masked.mlm_labels != IGNORE, masked.mlm_labels, masked.ids))
        out = model.outputs(clean)
        out_mlm = model.outputs(masked)
        for key, logits, labels in (("itm", out.itm_logits, clean.itm_labels),
                                    ("mlm", out_mlm.mlm_logits, out_mlm.mlm_targets),
                                    ("qa", out.qa_logits, clean.qa_labels)):
            keep = labels != IGNORE
            if keep.any():
                pred = logits.data.argmax(axis=1)
                hits[key][0] += int((pred[keep] == labels[keep]).sum())
                hits[key][1] += int(keep.sum())
    model.train(was_training)
    return {f"{k}_accuracy": (c / n if n else float("nan")) for k, (c, n) in hits.items()} | \
        {f"{k}_count": n for k, (_, n) in hits.items()}


def qa_accuracy(model: GridVLP, split: EncodedSplit, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(split), batch_size):
        batch = split.batch(np.arange(start, min(start + batch_size, len(split))))
        out = model.outputs(batch)
        correct += int((out.qa_logits.data.argmax(axis=1) == batch.qa_labels).sum())
    return correct / len(split)


def model_checkpoint(model: GridVLP, ws: Workspace, config: RunConfig, step: int,
                     kind: str, optimizer: Optional[AdamW] = None, extra: Optional[dict] = None) -> Checkpoint:
    tensors = dict(model.state_dict())
    for name, arr in ws.cnn.state_dict().items():
        tensors[CNN_PREFIX + name] = arr
    meta = {"kind": kind, "step": step, "vocab": ws.vocab.tokens, "answers": list(ANSWERS),
            "grid_channels": ws.cnn.out_channels, "cnn_channels": list(ws.cnn.channels),
            "cnn_blocks": ws.cnn.blocks_per_stage,
            "rng_state": step_rng(config.seed, step).bit_generator.state}
    opt_tensors = None
    if optimizer is not None:
        opt_tensors = optimizer.state_tensors()
        meta["optimizer"] = {"t": optimizer.state.t, "lr": optimizer.state.lr,
                             "beta1": optimizer.state.beta1, "beta2": optimizer.state.beta2,
                             "eps": optimizer.state.eps, "weight_decay": optimizer.state.weight_decay}
    meta.update(extra or {})
    return Checkpoint(config.to_dict(), tensors, opt_tensors, meta)


def restore_model(ckpt: Checkpoint, config: RunConfig) -> tuple[GridVLP, CnnEncoder, Vocabulary]:
    """Rebuild the model described by ``config`` and load ``ckpt`` into it.

    Shapes are checked tensor by tensor, so a config whose widths disagree with
    the checkpoint fails with the offending tensor's name.
    """
    if ckpt.meta.get("kind") not in ("pretrain", "finetune"):
        raise CheckpointError("not a fusion-model checkpoint")
    vocab = Vocabulary(ckpt.meta["vocab"])
    cnn_tensors = {k[len(CNN_PREFIX):]: v for k, v in ckpt.tensors.items() if k.startswith(CNN_PREFIX)}
    cnn = cnn_from_tensors(cnn_tensors, ckpt.meta["cnn_channels"], ckpt.meta["cnn_blocks"])
    model = build_model(config, vocab, cnn)
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith(CNN_PREFIX)})
    model.eval()
    return model, cnn, vocab


def run_pretrain(config: RunConfig, ws: Optional[Workspace] = None) -> dict:
    ws = ws or prepare(config)
    model = build_model(config, ws.vocab, ws.cnn, train=ws.train)
    cnn_before = {k: v.copy() for k, v in ws.cnn.state_dict().items()}
    log_path = config.path("pretrain_log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as f:
        _, opt = pretrain_loop(model, ws, config, f)
    if any(not np.array_equal(cnn_before[k], v) for k, v in ws.cnn.state_dict().items()):
        raise RuntimeError("frozen grid encoder changed during fusion pre-training")
    metrics = evaluate(model, ws.val, config, len(ws.vocab))
    save_checkpoint(config.path("pretrain.ckpt"),
                    model_checkpoint(model, ws, config, config.steps, "pretrain",
                                     opt, {"metrics": metrics}))
    return metrics


def finetune_loop(model: GridVLP, ws: Workspace, config: RunConfig,
                  log_file=None) -> tuple[dict, AdamW]:
    """Train the QA head (and the fusion stack) on QA samples with complete grids."""
    if config.grid_sampling:
        raise ValueError("fine-tuning must see the complete grid set")
    train = ws.train.select(ws.train.is_qa)
    val = ws.val.select(ws.val.is_qa)
    named = [(n, p) for n, p in model.trainable()
             if not n.startswith(("heads.mlm", "heads.itm"))]
    opt = make_optimizer(named, config, config.finetune_lr)
    curve = []
    reached = None
    for step in range(config.finetune_steps + 1):
        if step % config.eval_every == 0:
            acc = qa_accuracy(model, val)
            curve.append({"step": step, "qa_accuracy": acc})
            if reached is None and acc >= config.qa_threshold:
                reached = step
                if config.stop_at_threshold:
                    break
        if step == config.finetune_steps:
            break
        rng = step_rng(config.seed, step, stream=8)
        batch = train.batch(batch_indices(len(train), config.batch_size, step, config.seed))
        full = batch.grid_mask.sum(axis=1)
        model.train()
        opt.zero_grad()
        with Tape() as tape:
            out = model.outputs(batch, rng)
            loss = T.softmax_cross_entropy(out.qa_logits, batch.qa_labels, IGNORE)
            tape.backward(loss)
        opt.step()
        rec = {"step": step, "loss_qa": float(loss.data), "grid_tokens": full.tolist()}
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
    model.eval()
    return {"steps_to_threshold": reached, "curve": curve,
            "final_qa_accuracy": curve[-1]["qa_accuracy"]}, opt


def run_finetune(config: RunConfig, ws: Optional[Workspace] = None) -> dict:
    """Fine-tune QA from ``init_checkpoint`` (or from random init when unset).

    The QA head is re-initialised either way, so only the embeddings and the
    fusion encoder carry over from pre-training.
    """
    if config.init_checkpoint:
        ckpt = load_checkpoint(config.init_checkpoint)
        model, cnn, vocab = restore_model(ckpt, config)
        ws = ws or prepare(config, cnn=cnn, vocab=vocab)
    else:
        ws = ws or prepare(config)
        model = build_model(config, ws.vocab, ws.cnn, train=ws.train)
    model.reset_qa_head(config.seed)
    log_path = config.path("finetune_log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as f:
        result, opt = finetune_loop(model, ws, config, f)
    save_checkpoint(config.path("finetune.ckpt"),
                    model_checkpoint(model, ws, config, config.finetune_steps, "finetune",
                                     opt, {"metrics": {k: v for k, v in result.items()
                                                                   if k != "curve"}}))
    return result


def run_eval(config: RunConfig) -> dict:
    path = config.checkpoint or str(config.path("pretrain.ckpt"))
    ckpt = load_checkpoint(path)
    model, cnn, vocab = restore_model(ckpt, config)
    records = read_dataset(config.data_dir, config.eval_split)
    split = encode_split(records, vocab, cnn, config)
    return evaluate(model, split, config, len(vocab))


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
