import math

import numpy as np
import pytest

from gridvlp import tensor as T
from gridvlp.fusion import FusionConfig
from gridvlp.model import GridVLP
from gridvlp.tasks import IGNORE, PretrainBatch, apply_mlm_masking, itm_corrupt, mask_tokens
from gridvlp.tensor import Tape
from gridvlp.text import CLS, MASK, PAD, SEP, build_vocab, tokenize, tokenize_batch

VOCAB = build_vocab(["there is a red square and a blue circle", "what color is the triangle"])
N_ANSWERS = 9


def make_batch(texts, is_qa, n_grids=4, channels=6, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ids, valid = tokenize_batch(texts, VOCAB, 20)
    B = len(texts)
    is_qa = np.asarray(is_qa, bool)
    return PretrainBatch(
        ids=ids, text_mask=valid,
        grid_feats=rng.normal(size=(B, n_grids, channels)).astype(dtype),
        grid_mask=np.ones((B, n_grids), bool),
        grid_cells=np.zeros((B, n_grids, 2), np.int64),
        itm_labels=np.where(is_qa, IGNORE, 1),
        mlm_labels=np.full(ids.shape, IGNORE),
        qa_labels=np.where(is_qa, rng.integers(0, N_ANSWERS, B), IGNORE),
        is_qa=is_qa)


def make_model(seed=0, dtype=np.float32, **cfg):
    config = FusionConfig(**{"layers": 2, "width": 16, "heads": 2, "dropout": 0.0, **cfg})
    model = GridVLP(len(VOCAB), N_ANSWERS, 6, config, seed=seed).astype(dtype)
    model.eval()
    return model


def test_mask_prob_zero_changes_nothing():
    seq = tokenize("there is a red square", VOCAB)
    masked, labels = apply_mlm_masking(seq, len(VOCAB), np.random.default_rng(0), mask_prob=0.0)
    assert masked == seq
    assert np.all(labels == IGNORE)


def test_mask_prob_one_forced_mask_branch():
    seq = tokenize("there is a red square", VOCAB)
    masked, labels = apply_mlm_masking(seq, len(VOCAB), np.random.default_rng(0), mask_prob=1.0,
                                       mask_frac=1.0, random_frac=0.0)
    real = seq.valid & (seq.ids != CLS) & (seq.ids != SEP)
    assert np.all(masked.ids[real] == MASK)
    np.testing.assert_array_equal(labels[real], seq.ids[real])
    assert np.all(labels[~real] == IGNORE)
    np.testing.assert_array_equal(masked.ids[~real], seq.ids[~real])


def test_special_tokens_never_masked():
    ids, valid = tokenize_batch(["a red square"] * 500, VOCAB, 20)
    out, labels = mask_tokens(ids, valid, len(VOCAB), np.random.default_rng(1), mask_prob=1.0)
    special = (ids == CLS) | (ids == SEP) | (ids == PAD)
    np.testing.assert_array_equal(out[special], ids[special])
    assert np.all(labels[special] == IGNORE)
    replaced = (out != ids) & (out != MASK)
    assert np.all(out[replaced] >= 5)


def test_itm_corrupt_prob_zero():
    batch = make_batch(["a red square", "a blue circle", "what color is the triangle"], [0, 0, 1])
    out = itm_corrupt(batch, np.random.default_rng(0), 0.0)
    np.testing.assert_array_equal(out.ids, batch.ids)
    assert out.itm_labels.tolist() == [1, 1, IGNORE]


def test_itm_corrupt_prob_one_swaps_pair():
    batch = make_batch(["a red square", "a blue circle"], [0, 0])
    batch.mlm_labels[:, 1] = batch.ids[:, 1]
    out = itm_corrupt(batch, np.random.default_rng(0), 1.0)
    np.testing.assert_array_equal(out.ids[0], batch.ids[1])
    np.testing.assert_array_equal(out.ids[1], batch.ids[0])
    assert out.itm_labels.tolist() == [0, 0]
    assert np.all(out.mlm_labels == IGNORE)


def test_itm_corrupt_needs_two_samples():
    with pytest.raises(ValueError):
        itm_corrupt(make_batch(["a red square"], [0]), np.random.default_rng(0), 0.5)


def test_itm_corrupt_never_reuses_own_caption():
    texts = ["a red square", "a red square", "a blue circle", "there is a red square"]
    batch = make_batch(texts, [0, 0, 0, 0])
    for seed in range(50):
        out = itm_corrupt(batch, np.random.default_rng(seed), 1.0)
        for i in range(len(texts)):
            if out.itm_labels[i] == 0:
                assert not np.array_equal(out.ids[i], batch.ids[i])


def test_untrained_losses_near_uniform():
    texts = ["there is a red square", "a blue circle", "what color is the triangle"] * 4
    batch = make_batch(texts, [0, 0, 1] * 4, seed=1)
    ids, labels = mask_tokens(batch.ids, batch.text_mask, len(VOCAB), np.random.default_rng(2), 0.5)
    batch = batch.replace(ids=ids, mlm_labels=labels)
    losses = make_model(seed=3).losses(batch)
    assert abs(losses.mlm.item() - math.log(len(VOCAB))) < 0.1
    assert abs(losses.itm.item() - math.log(2)) < 0.1
    assert abs(losses.qa.item() - math.log(N_ANSWERS)) < 0.1


def test_saturated_heads_give_zero_total():
    batch = make_batch(["a red square", "a blue circle"], [0, 0])
    model = make_model()
    model.heads.itm.weight.data[...] = 0.0
    model.heads.itm.bias.data[...] = [-50.0, 50.0]
    losses = model.losses(batch)
    assert losses.mlm.item() == 0.0 and losses.qa.item() == 0.0
    assert losses.total.item() < 1e-12


def log_softmax_row(row):
    m = max(row)
    return [v - m - math.log(sum(math.exp(u - m) for u in row)) for v in row]


def test_two_sample_losses_match_direct_computation():
    batch = make_batch(["there is a red square", "what color is the triangle"], [0, 1],
                       seed=4, dtype=np.float64)
    batch.mlm_labels[0, 2] = batch.ids[0, 2]
    batch.mlm_labels[0, 4] = batch.ids[0, 4]
    batch.ids[0, 2] = MASK
    model = make_model(seed=5, dtype=np.float64)
    out = model.outputs(batch)
    losses = model.losses(batch)
    mlm = [-log_softmax_row(list(r))[t] for r, t in zip(out.mlm_logits.data, [batch.mlm_labels[0, 2],
                                                                             batch.mlm_labels[0, 4]])]
    itm = -log_softmax_row(list(out.itm_logits.data[0]))[1]
    qa = -log_softmax_row(list(out.qa_logits.data[1]))[batch.qa_labels[1]]
    assert abs(losses.mlm.item() - sum(mlm) / 2) < 1e-8
    assert abs(losses.itm.item() - itm) < 1e-8
    assert abs(losses.qa.item() - qa) < 1e-8
    assert abs(losses.total.item() - (sum(mlm) / 2 + itm + qa)) < 1e-8


def test_total_gradient_is_sum_of_task_gradients():
    batch = make_batch(["there is a red square", "a blue circle", "what color is the triangle"],
                       [0, 0, 1], seed=6, dtype=np.float64)
    batch.mlm_labels[0, 3] = batch.ids[0, 3]
    batch = batch.replace(itm_labels=np.array([1, 0, IGNORE]))
    model = make_model(seed=7, dtype=np.float64)
    params = [p for _, p in model.trainable()]

    def grads(pick):
        for p in params:
            p.grad = None
        with Tape() as tape:
            tape.backward(pick(model.losses(batch)))
        return [p.grad.copy() for p in params]

    total = grads(lambda l: l.total)
    parts = [grads(lambda l, k=k: getattr(l, k)) for k in ("mlm", "itm", "qa")]
    for i in range(len(params)):
        np.testing.assert_allclose(total[i], parts[0][i] + parts[1][i] + parts[2][i],
                                   rtol=1e-9, atol=1e-12)


def test_pad_ids_do_not_change_losses():
    batch = make_batch(["a red square", "what color is the triangle"], [0, 1], seed=8)
    batch.mlm_labels[0, 2] = batch.ids[0, 2]
    model = make_model(seed=9)
    base = model.losses(batch).total.data
    ids = batch.ids.copy()
    ids[~batch.text_mask] = VOCAB.id("circle")
    assert np.array_equal(model.losses(batch.replace(ids=ids)).total.data, base)


def test_ignored_rows_do_not_affect_loss():
    logits = np.random.default_rng(0).normal(size=(4, 5))
    labels = np.array([1, IGNORE, 3, IGNORE])
    a = T.softmax_cross_entropy(T.Tensor(logits), labels, IGNORE).item()
    logits[[1, 3]] = 1e3
    b = T.softmax_cross_entropy(T.Tensor(logits), labels, IGNORE).item()
    assert a == b
