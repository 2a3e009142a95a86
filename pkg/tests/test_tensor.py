import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp import tensor as T
from gridvlp.gradcheck import check_gradients
from gridvlp.tensor import NonFiniteError, ShapeError, Tape, Tensor

GRAD_TOL = 1e-4


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), dtype=np.float64)


# -- independent oracles ------------------------------------------------------

def matmul_loops(a, b):
    M, K = a.shape
    _, N = b.shape
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            s = 0.0
            for k in range(K):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def conv_loops(x, w, stride, pad):
    cin, H, W = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            s += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = s
    return out


def cross_entropy_rows(logits, labels):
    total, n = 0.0, 0
    for row, y in zip(logits, labels):
        if y == -100:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
        n += 1
    return total / n if n else 0.0


def attention_reference(q, k, v, heads, mask):
    L, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    weights = np.zeros((heads, L, L))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = [q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(L)]
            valid = [j for j in range(L) if mask[j]]
            m = max(scores[j] for j in valid)
            e = {j: math.exp(scores[j] - m) for j in valid}
            z = sum(e.values())
            for j in valid:
                weights[h, i, j] = e[j] / z
                out[i, sl] += weights[h, i, j] * v[j, sl]
    return out, weights


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_projection():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), b).data, b.data)
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    ref = matmul_loops(a, b)
    assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.arange(16.0).reshape(1, 4, 4))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_stride_two():
    out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2, pad=0)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    ref = conv_loops(x, w, 2, 1)
    assert got.shape == (3, 4, 4)
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)) < 1e-12


def test_conv_batched_equals_single():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(3, 2, 7, 9)), rng.normal(size=(4, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w), 2, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv_loops(x[i], w, 2, 1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad", list(itertools.product([1, 2, 3, 5], [1, 2, 3], [0, 1, 2])))
def test_conv_output_shape_sweep(k, stride, pad):
    H, W = 11, 8
    out = T.conv2d(Tensor(np.zeros((2, H, W))), Tensor(np.zeros((3, 2, k, k))), stride, pad)
    assert out.shape == (3, (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), 1, 1)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_and_unit_vectors():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor([5.0] * 4), one, zero).data, np.zeros(4))
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, -1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 16), st.integers(0, 2**31 - 1))
def test_layer_norm_moments(rows, d, seed):
    x = np.random.default_rng(seed).normal(0.0, 3.0, (rows, d)) + 7.0
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-4)


# -- softmax / cross entropy --------------------------------------------------

def test_cross_entropy_uniform_and_saturated():
    assert T.softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), [1]).item() == pytest.approx(math.log(3))
    assert T.softmax_cross_entropy(Tensor([[100.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-30)


def test_cross_entropy_matches_direct_rows():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 3, (4, 7))
    labels = [3, 0, 6, 2]
    got = T.softmax_cross_entropy(Tensor(logits), labels).item()
    ref = cross_entropy_rows(logits.tolist(), labels)
    assert abs(got - ref) / abs(ref) < 1e-10


def test_cross_entropy_ignore_and_range():
    logits = Tensor(np.random.default_rng(4).normal(size=(3, 5)))
    assert T.softmax_cross_entropy(logits, [-100, -100, -100]).item() == 0.0
    full = T.softmax_cross_entropy(logits, [1, -100, 4]).item()
    assert full == pytest.approx(cross_entropy_rows(logits.data.tolist(), [1, -100, 4]), rel=1e-6)
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(logits, [5, 0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, (rows, cols)).astype(np.float32)
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# -- attention ----------------------------------------------------------------

def test_attention_single_key_returns_value():
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.normal(size=(1, 8))) for _ in range(3))
    np.testing.assert_allclose(T.multi_head_attention(q, k, v, 2).data, v.data, rtol=1e-12)


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(6)
    q = Tensor(rng.normal(size=(4, 8)))
    k = Tensor(np.tile(rng.normal(size=(1, 8)), (4, 1)))
    v = Tensor(rng.normal(size=(4, 8)))
    out = T.multi_head_attention(q, k, v, 4).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (4, 1)), rtol=1e-12, atol=1e-14)


def test_attention_mask_matches_reference():
    rng = np.random.default_rng(7)
    q, k, v = (rng.normal(size=(5, 8)) for _ in range(3))
    mask = np.array([True, False, True, True, False])
    out, w = T.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2, mask, return_weights=True)
    ref_out, ref_w = attention_reference(q, k, v, 2, mask)
    assert np.all(w.data[..., ~mask] == 0.0)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(w.data, ref_w, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(out.data, ref_out, rtol=1e-10, atol=1e-12)


def test_attention_heads_must_divide_width():
    x = Tensor(np.zeros((3, 6)))
    with pytest.raises(ShapeError):
        T.multi_head_attention(x, x, x, 4)


# -- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_half_square_gives_x():
    x = Tensor(np.random.default_rng(1).normal(size=(5,)), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.mul(T.sum_(T.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_unreached_tensor_gets_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        _ = T.mul(b, 2.0)
        tape.backward(T.sum_(a))
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, 2.0)
    assert not y.requires_grad


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.matmul(x, x)
        T.sum_(T.add(y, x))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.requires_grad is False or id(inp) in seen or inp is x
        seen.add(id(node.out))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts():
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(8)
    q, k, v = (Tensor(rng.normal(size=(2, 6, 8)).astype(np.float32)) for _ in range(3))
    a = T.multi_head_attention(q, k, v, 2).data
    b = T.multi_head_attention(q, k, v, 2).data
    assert a.tobytes() == b.tobytes()


# -- finite-difference gradient checks (double precision) ---------------------

SHAPES = [(3, 4), (2, 5, 3), (1, 7)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "gelu", "tanh", "relu", "softmax",
                                "sum", "mean", "transpose", "reshape", "take", "concat"])
def test_elementwise_and_shape_grads(op, shape):
    rng = np.random.default_rng(hash((op, shape)) % 2**32)
    x = t64(rng, *shape)
    y = t64(rng, *shape)
    if op == "div":
        y.data[:] = np.abs(y.data) + 0.5
    if op == "relu":
        x.data[np.abs(x.data) < 1e-2] = 0.3
    probe = rng.normal(size=shape)
    fns = {
        "add": lambda: T.add(x, T.take(y, [0], axis=0)),
        "sub": lambda: T.sub(x, y),
        "mul": lambda: T.mul(x, y),
        "div": lambda: T.div(x, y),
        "gelu": lambda: T.gelu(x),
        "tanh": lambda: T.tanh(x),
        "relu": lambda: T.relu(x),
        "softmax": lambda: T.softmax(x, axis=-1),
        "sum": lambda: T.sum_(x, axis=-1, keepdims=True),
        "mean": lambda: T.mean(x, axis=0),
        "transpose": lambda: T.transpose(x),
        "reshape": lambda: T.reshape(x, (-1,)),
        "take": lambda: T.take(x, [0, 0, shape[0] - 1], axis=0),
        "concat": lambda: T.concat([x, y], axis=-1),
    }

    def loss():
        out = fns[op]()
        w = np.random.default_rng(99).normal(size=out.shape)
        return T.sum_(T.mul(out, Tensor(w)))

    errs = check_gradients(loss, [x, y])
    used = [0, 1] if op in ("add", "sub", "mul", "div", "concat") else [0]
    assert max(errs[i] for i in used) < GRAD_TOL
    del probe


@pytest.mark.parametrize("m,k,n", [(3, 4, 2), (1, 5, 5), (6, 2, 3)])
def test_matmul_grad(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = t64(rng, m, k), t64(rng, k, n)
    w = Tensor(rng.normal(size=(m, n)))
    errs = check_gradients(lambda: T.sum_(T.mul(T.matmul(a, b), w)), [a, b])
    assert max(errs.values()) < GRAD_TOL


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(10)
    a, b = t64(rng, 2, 3, 4), t64(rng, 4, 5)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    errs = check_gradients(lambda: T.sum_(T.mul(T.matmul(a, b), w)), [a, b])
    assert max(errs.values()) < GRAD_TOL


@pytest.mark.parametrize("lead,bias", [((4,), True), ((2, 3), True), ((5,), False)])
def test_linear_grad_and_value(lead, bias):
    rng = np.random.default_rng(len(lead) * 7 + bias)
    x, w = t64(rng, *lead, 3), t64(rng, 3, 2)
    b = t64(rng, 2) if bias else None
    ref = x.data @ w.data + (b.data if bias else 0.0)
    assert np.array_equal(T.linear(x, w, b).data, ref)
    probe = Tensor(rng.normal(size=lead + (2,)))
    params = [x, w] + ([b] if bias else [])
    errs = check_gradients(lambda: T.sum_(T.mul(T.linear(x, w, b), probe)), params)
    assert max(errs.values()) < GRAD_TOL


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_detected_even_when_sum_overflows():
    big = Tensor(np.full(4, 3e38, np.float32))
    T.add(big, 0.0)  # sum overflows but every element is finite
    with pytest.raises(NonFiniteError):
        T.mul(big, 10.0)


@pytest.mark.parametrize("shape,k,stride,pad", [((2, 6, 6), 3, 1, 1), ((1, 3, 7, 5), 3, 2, 1),
                                                ((3, 5, 5), 2, 2, 0)])
def test_conv_grad(shape, k, stride, pad):
    rng = np.random.default_rng(len(shape) * 10 + k)
    x = t64(rng, *shape)
    cin = shape[-3]
    w = t64(rng, 2, cin, k, k)
    out_shape = T.conv2d(x, w, stride, pad).shape
    probe = Tensor(rng.normal(size=out_shape))
    errs = check_gradients(lambda: T.sum_(T.mul(T.conv2d(x, w, stride, pad), probe)), [x, w])
    assert max(errs.values()) < GRAD_TOL


@pytest.mark.parametrize("shape", [(2, 3, 8), (4, 5), (1, 1, 6)])
def test_layer_norm_grad(shape):
    rng = np.random.default_rng(shape[-1])
    x = t64(rng, *shape)
    g, b = t64(rng, shape[-1]), t64(rng, shape[-1])
    probe = Tensor(rng.normal(size=shape))
    errs = check_gradients(lambda: T.sum_(T.mul(T.layer_norm(x, g, b, 1e-5), probe)), [x, g, b])
    assert max(errs.values()) < GRAD_TOL


@pytest.mark.parametrize("rows,classes", [(4, 7), (1, 3), (6, 2)])
def test_cross_entropy_grad(rows, classes):
    rng = np.random.default_rng(rows * classes)
    logits = t64(rng, rows, classes)
    labels = rng.integers(0, classes, rows)
    labels[0] = -100 if rows > 1 else labels[0]
    errs = check_gradients(lambda: T.softmax_cross_entropy(logits, labels), [logits])
    assert errs[0] < GRAD_TOL


@pytest.mark.parametrize("lead,L,d,heads", [((), 5, 8, 2), ((2,), 4, 6, 3), ((1,), 3, 4, 1)])
def test_attention_grad(lead, L, d, heads):
    rng = np.random.default_rng(L * d)
    q, k, v = t64(rng, *lead, L, d), t64(rng, *lead, L, d), t64(rng, *lead, L, d)
    mask = np.ones(lead + (L,), dtype=bool)
    mask[..., -1] = False
    probe = Tensor(rng.normal(size=lead + (L, d)))
    errs = check_gradients(lambda: T.sum_(T.mul(T.multi_head_attention(q, k, v, heads, mask), probe)),
                           [q, k, v])
    assert max(errs.values()) < GRAD_TOL


def test_attention_dropout_grad():
    rng = np.random.default_rng(21)
    q, k, v = t64(rng, 4, 6), t64(rng, 4, 6), t64(rng, 4, 6)
    probe = Tensor(rng.normal(size=(4, 6)))

    def loss():
        out = T.multi_head_attention(q, k, v, 2, dropout_p=0.3,
                                     rng=np.random.default_rng(5), training=True)
        return T.sum_(T.mul(out, probe))

    errs = check_gradients(loss, [q, k, v])
    assert max(errs.values()) < GRAD_TOL


@pytest.mark.parametrize("n,d", [(7, 3), (4, 5), (10, 2)])
def test_embedding_grad_accumulates_repeats(n, d):
    rng = np.random.default_rng(n)
    table = t64(rng, n, d)
    ids = np.array([[0, 1, 1], [n - 1, 0, 2]])
    probe = Tensor(rng.normal(size=(2, 3, d)))
    errs = check_gradients(lambda: T.sum_(T.mul(T.embedding(table, ids), probe)), [table])
    assert errs[0] < GRAD_TOL


def test_dropout_fixed_mask_grad():
    rng = np.random.default_rng(11)
    x = t64(rng, 4, 5)

    def loss():
        return T.sum_(T.mul(T.dropout(x, 0.3, np.random.default_rng(0)), x))

    errs = check_gradients(loss, [x])
    assert errs[0] < GRAD_TOL
