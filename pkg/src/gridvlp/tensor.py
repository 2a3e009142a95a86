"""Dense tensors with tape-based reverse-mode autodiff.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires gradients; outside a tape everything runs as plain numpy, which
is what inference and benchmarking use.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local: a worker that wants gradients owns its own tape.
    Nodes are appended as they execute, so the list is already in topological
    order and ``backward`` is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor recorded on ``tape``.

    Leaf gradients accumulate across calls; tensors with no path to ``loss``
    end up with a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
            else:
                inp.grad += gi
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # A sum is finite iff every term is, unless finite terms overflow; only
    # then is the elementwise test needed. This is much cheaper per call.
    if not math.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output (shape {arr.shape})")


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    _check_finite(op, out_data)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, out, tuple(inputs), bw))
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", a.data / b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` as one recorded op; ``weight`` is (d_in, d_out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    lead = x.ndim - 1

    def bw(g):
        gx = g @ weight.data.T
        gw = np.tensordot(x.data, g, axes=(tuple(range(lead)), tuple(range(lead))))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple(range(lead)))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate grads."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim

    k = index.ndim

    def bw(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        if k == 0:
            moved[index] += g
        else:
            gi = np.moveaxis(g, list(range(axis, axis + k)), list(range(k)))
            np.add.at(moved, index, gi)
        return (out,)

    return _record("take", np.take(x.data, index, axis=axis), (x,), bw)


def take_along_rows(x: Tensor, rows) -> Tensor:
    """``x[b, rows[b, j]]`` for a batch ``x`` of shape (B, N, ...)."""
    rows = np.asarray(rows, dtype=np.int64)
    bidx = np.arange(x.shape[0])[:, None]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (bidx, rows), g)
        return (out,)

    return _record("take_along_rows", x.data[bidx, rows], (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return take(table, ids, axis=0)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU, as in the original BERT code."""
    xd = x.data
    sq = xd * xd  # float32 ** on negative inputs is very slow
    inner = _GELU_C * (xd + 0.044715 * sq * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", p, (x,), bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Fused layers
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = np.add.reduce(x.data, axis=-1, keepdims=True) / d
    xc = x.data - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gh = g * gamma.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", out, (x, gamma, beta), bw)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (Cin,H,W) or (B,Cin,H,W) input with (Cout,Cin,k,k) kernels."""
    x = _lift(x, kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError("conv2d expects (B,Cin,H,W) input and (Cout,Cin,k,k) kernels")
    B, cin, H, W = xd.shape
    cout, kcin, k, k2 = kernels.shape
    if kcin != cin or k != k2:
        raise ShapeError(f"kernel shape {kernels.shape} does not match input channels {cin}")
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError("conv2d needs k >= 1, stride >= 1, pad >= 0")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    ho = conv_output_size(H, k, stride, pad)
    wo = conv_output_size(W, k, stride, pad)
    if pad:
        xp = np.zeros((B, cin, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = xd
    else:
        xp = xd
    # im2col in channel-major order: cols[c, i, j, b, y, x] = xp[b, c, i + s*y, j + s*x]
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, k, k, B, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + he:stride, j:j + we:stride]
    cols = cols.reshape(cin * k * k, B * ho * wo)
    wmat = kernels.data.reshape(cout, cin * k * k)
    out = (wmat @ cols).reshape(cout, B, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(cout, B * ho * wo)
        dw = (gmat @ cols.T).reshape(kernels.shape)
        dcols = (wmat.T @ gmat).reshape(cin, k, k, B, ho, wo)
        dxp = np.zeros((B, cin) + xp.shape[2:], dtype=np.result_type(g.dtype, xp.dtype))
        dxt = dxp.transpose(1, 0, 2, 3)
        for i in range(k):
            for j in range(k):
                dxt[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, i, j]
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        if single:
            dx = dx[0]
        return dx, dw

    return _record("conv2d", out, (x, kernels), bw)


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ``ignore_index``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {labels.shape[0]} labels")
    V = logits.shape[1]
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= V)):
        raise IndexError(f"label out of range [0, {V})")
    n = int(valid.sum())
    if n == 0:
        return _record("softmax_cross_entropy", np.zeros((), dtype=logits.dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, labels[rows]].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[rows, labels[rows]] -= 1.0
        p[~valid] = 0.0
        return (p * (g / n),)

    return _record("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None,
                         dropout_p: float = 0.0, rng=None, training: bool = False,
                         return_weights: bool = False):
    """Scaled dot-product attention over (..., L, d) inputs split into ``heads``.

    ``mask`` is a boolean array of shape (..., L) marking valid key positions;
    invalid keys get exactly zero weight.
    """
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    lead = q.shape[:-2]
    Lq, Lk = q.shape[-2], k.shape[-2]
    scale = 1.0 / np.sqrt(dh)

    def split(a, L):   # (..., L, d) -> (..., heads, L, dh)
        return np.swapaxes(a.reshape(lead + (L, heads, dh)), -2, -3)

    qh, kh, vh = split(q.data, Lq), split(k.data, Lk), split(v.data, Lk)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * q.dtype.type(scale)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        bias = np.where(mask, 0.0, -1e9).astype(q.dtype)
        scores = scores + bias.reshape(mask.shape[:-1] + (1, 1, mask.shape[-1]))
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    weights = e / e.sum(axis=-1, keepdims=True)
    attn = weights
    keep = None
    if training and dropout_p > 0.0:
        keep = (rng.random(weights.shape) >= dropout_p).astype(q.dtype) / q.dtype.type(1.0 - dropout_p)
        attn = weights * keep
    ctx = attn @ vh
    out = np.swapaxes(ctx, -2, -3).reshape(lead + (Lq, d))

    def bw(g):
        gctx = split(g, Lq)
        gattn = gctx @ np.swapaxes(vh, -1, -2)
        gv = np.swapaxes(attn, -1, -2) @ gctx
        gw = gattn * keep if keep is not None else gattn
        gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh

        def merge(a, L):
            return np.swapaxes(a, -2, -3).reshape(lead + (L, d))

        return merge(gq, Lq), merge(gk, Lk), merge(gv, Lk)

    out = _record("multi_head_attention", np.ascontiguousarray(out), (q, k, v), bw)
    if return_weights:
        return out, Tensor(weights)
    return out


def as_tensor(x, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(x, requires_grad=requires_grad, dtype=dtype)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
