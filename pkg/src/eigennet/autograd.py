"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` is an append-only list of nodes; every recorded operation appends
one node whose parents already sit earlier in the list, so walking the list
in reverse replays the chain rule with each node visited at most once.
Recording happens only while a tape is active (``with Tape():``) and only for
results that depend on a gradient-requiring leaf. Outside a tape, the same
functions are plain eager numpy computations.

Tapes are independent: several may be replayed concurrently by different
threads as long as each tape (and the tensors recorded on it) is driven by
one thread at a time.
"""

import threading

import numpy as np

from . import kernels
from .errors import DimensionError, FactorShapeError, LabelError, RankError

_active = threading.local()


def _current_tape():
    return getattr(_active, "tape", None)


class Node:
    """One recorded operation: kind, parent node ids, and its backward rule.

    ``backward(grad)`` returns one gradient per parent slot; slots whose
    parent id is None (inputs that need no gradient) may return None.
    """

    __slots__ = ("op", "parents", "backward", "leaf")

    def __init__(self, op, parents, backward, leaf=None):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Recording context for one forward computation."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._outer = _current_tape()
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = self._outer
        return False

    def _record(self, op, parents, backward, leaf=None):
        self.nodes.append(Node(op, parents, backward, leaf))
        return len(self.nodes) - 1


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``grad`` accumulates d(loss)/d(self) for gradient-requiring leaves after
    ``backward``. A detached tensor carries no node reference and never
    receives gradients.
    """

    __slots__ = ("data", "grad", "tape", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.tape = None
        self.node = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, taped={self.node is not None})"


def parameter(data, name=None):
    """Gradient-requiring leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _parent_id(tape, t):
    """Node id of t on the active tape, registering leaves lazily."""
    if t.tape is tape and t.node is not None:
        return t.node
    if t.requires_grad:
        t.tape = tape
        t.node = tape._record("leaf", (), None, leaf=t)
        return t.node
    return None


def _apply(op, inputs, value, backward_builder):
    """Compute eagerly; record a node when the result depends on the tape."""
    tape = _current_tape()
    out = Tensor(value)
    if tape is None:
        return out
    ids = tuple(_parent_id(tape, t) for t in inputs)
    if all(i is None for i in ids):
        return out
    needs = tuple(i is not None for i in ids)
    out.tape = tape
    out.node = tape._record(op, ids, backward_builder(needs))
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise RankError(f"matmul expects matrices, got ranks {a.data.ndim} and {b.data.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def build(needs):
        def backward(g):
            return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

        return backward

    return _apply("matmul", (a, b), ad @ bd, build)


def _elementwise(op, a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")

    def reduce_to(g, shape):
        # only scalar broadcasting exists, so the reduction is a full sum
        return g if g.shape == shape else np.asarray(g.sum())

    ad, bd = a.data, b.data
    if op == "add":
        value = ad + bd
        grads = lambda g: (g, g)
    elif op == "sub":
        value = ad - bd
        grads = lambda g: (g, -g)
    elif op == "mul":
        value = ad * bd
        grads = lambda g: (g * bd, g * ad)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")

    def build(needs):
        def backward(g):
            ga, gb = grads(g)
            return (
                reduce_to(ga, ad.shape) if needs[0] else None,
                reduce_to(gb, bd.shape) if needs[1] else None,
            )

        return backward

    return _apply(op, (a, b), value, build)


def add(a, b):
    return _elementwise("add", a, b)


def sub(a, b):
    return _elementwise("sub", a, b)


def mul(a, b):
    return _elementwise("mul", a, b)


def scale(a, c):
    """Multiply by a plain Python constant."""
    a = _as_tensor(a)
    c = float(c)

    def build(needs):
        return lambda g: (g * c,)

    return _apply("scale", (a,), a.data * c, build)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient at exactly 0 is 0

    def build(needs):
        return lambda g: (g * mask,)

    return _apply("relu", (x,), np.where(mask, x.data, 0.0), build)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise RankError(f"transpose expects a matrix, got rank {a.data.ndim}")

    def build(needs):
        return lambda g: (g.T,)

    return _apply("transpose", (a,), a.data.T.copy(), build)


def scale_columns(m, v):
    """out[:, j] = m[:, j] * v[j], differentiable in both arguments."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise RankError("scale_columns expects a matrix and a vector")
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"scale_columns: {m.shape[1]} columns vs {v.shape[0]} scales")
    md, vd = m.data, v.data

    def build(needs):
        def backward(g):
            return (g * vd if needs[0] else None, (g * md).sum(axis=0) if needs[1] else None)

        return backward

    return _apply("scale_columns", (m, v), md * vd, build)


def add_bias(z, bias):
    """Add a per-row bias vector to every column of a matrix."""
    z, bias = _as_tensor(z), _as_tensor(bias)
    if z.data.ndim != 2 or bias.data.ndim != 1:
        raise RankError("add_bias expects a matrix and a vector")
    if z.shape[0] != bias.shape[0]:
        raise DimensionError(f"add_bias: {z.shape[0]} rows vs bias length {bias.shape[0]}")

    def build(needs):
        def backward(g):
            return (g if needs[0] else None, g.sum(axis=1) if needs[1] else None)

        return backward

    return _apply("add_bias", (z, bias), z.data + bias.data[:, None], build)


def sum_all(x):
    x = _as_tensor(x)
    shape = x.shape

    def build(needs):
        return lambda g: (np.broadcast_to(np.asarray(g), shape).copy(),)

    return _apply("sum", (x,), np.asarray(x.data.sum()), build)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape

    def build(needs):
        return lambda g: (g.reshape(old),)

    return _apply("reshape", (x,), x.data.reshape(shape).copy(), build)


def permute(x, axes):
    x = _as_tensor(x)
    inverse = tuple(np.argsort(axes))

    def build(needs):
        return lambda g: (g.transpose(inverse),)

    return _apply("permute", (x,), x.data.transpose(axes).copy(), build)


def mean_hw(x):
    """Mean over the two trailing spatial axes of a b*c*h*w tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise RankError(f"mean_hw expects a b*c*h*w tensor, got rank {x.data.ndim}")
    b, c, h, w = x.shape
    area = h * w

    def build(needs):
        def backward(g):
            return (np.broadcast_to(g[:, :, None, None] / area, (b, c, h, w)).copy(),)

        return backward

    return _apply("mean_hw", (x,), x.data.mean(axis=(2, 3)), build)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by row-max subtraction; the backward rule is the closed form
    (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise RankError(f"logits must be batch x classes, got rank {logits.data.ndim}")
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise LabelError(f"labels must be integer class indices, got dtype {labels.dtype}")
    b, c = logits.shape
    if b < 1:
        raise DimensionError("empty batch")
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    logp = shifted - np.log(exp.sum(axis=1, keepdims=True))
    value = np.asarray(-logp[np.arange(b), labels].mean())

    def build(needs):
        def backward(g):
            d = probs.copy()
            d[np.arange(b), labels] -= 1.0
            return (d * (float(g) / b),)

        return backward

    return _apply("softmax_ce", (logits,), value, build)


def gram_orth_penalty(m):
    """Squared Frobenius deviation of the Gram matrix from identity."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise RankError(f"gram_orth_penalty expects a matrix, got rank {m.data.ndim}")
    rows, cols = m.shape
    if rows < cols:
        raise FactorShapeError(f"thin factor required: {rows} rows < {cols} columns")
    md = m.data
    dev = md.T @ md - np.eye(cols)

    def build(needs):
        # d/dM sum((M'M - I)^2) = 4 M (M'M - I), using symmetry of the deviation
        return lambda g: (md @ dev * (4.0 * float(g)),)

    return _apply("gram_orth", (m,), np.asarray((dev * dev).sum()), build)


def im2col(x, kh, kw, stride, pad):
    """Patch matrix of a b*c*h*w tensor; backward scatter-adds through col2im."""
    x = _as_tensor(x)
    cols = kernels.im2col_array(x.data, kh, kw, stride, pad)
    x_shape = x.shape

    def build(needs):
        return lambda g: (kernels.col2im_array(g, x_shape, kh, kw, stride, pad),)

    return _apply("im2col", (x,), cols, build)


def detach(x):
    """Value-identical tensor severed from every tape."""
    return _as_tensor(x).detach()


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad buffer."""
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise RankError("backward requires a scalar tensor")
    if loss.tape is None or loss.node is None:
        raise RankError("backward requires a loss recorded on a tape")
    tape = loss.tape
    nodes = tape.nodes
    grads = [None] * (loss.node + 1)
    grads[loss.node] = np.asarray(1.0)
    for nid in range(loss.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = nodes[nid]
        if node.leaf is not None:
            leaf = node.leaf
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        grads[nid] = None  # free intermediate buffers eagerly
