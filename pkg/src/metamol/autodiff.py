"""Reverse-mode automatic differentiation on a tape of tensor operations.

Every primitive's backward rule is itself expressed through traced
primitives, so gradients can be differentiated again: one inner
gradient-descent step can sit inside an outer objective and the outer
gradient is exact (``second_order_trace``). All math is 64-bit.

A tape is owned by one logical thread; tensors detached from a tape are
immutable values and may be shared freely.
"""

from __future__ import annotations

import enum
import threading
from typing import Callable, Iterable, Iterator

import numpy as np
import scipy.sparse


class ShapeMismatch(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonScalarRoot(ValueError):
    pass


class ModeUnset(ValueError):
    pass


class NonFiniteFunction(ValueError):
    pass


class GradMode(enum.Enum):
    FIRST_ORDER = "first_order"
    SECOND_ORDER = "second_order"


class Tensor:
    """Shape-carrying float64 array, optionally recorded on the active tape."""

    __slots__ = ("value", "requires_grad", "op", "node_id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op: _TapeOp | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)


class _TapeOp:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of operations; activate with a ``with`` block."""

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self.gradients: dict[Tensor, Tensor] = {}

    def __enter__(self) -> "Tape":
        _STACK.stack.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.ops)


class _Stack(threading.local):
    def __init__(self):
        self.stack: list[Tape | None] = []


_STACK = _Stack()


class no_trace:
    """Suspend recording inside the block (values still computed)."""

    def __enter__(self):
        _STACK.stack.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False


def _active_tape() -> Tape | None:
    stack = _STACK.stack
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    requires = False
    for t in inputs:
        if t.requires_grad:
            requires = True
            break
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = requires
    out.op = None
    out.node_id = None
    if requires:
        tape = _active_tape()
        if tape is not None:
            op = _TapeOp(out, inputs, vjp)
            out.op = op
            out.node_id = len(tape.ops)
            tape.ops.append(op)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` with traced ops."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    for i, s in enumerate(shape):
        if s == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = reduce_sum(g, axis=tuple(axes)) if axes else g
    if out.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(scale(g, -1.0), b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value * b.value

    def vjp(g):
        return (_unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
                _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    value = a.value * c

    def vjp(g):
        return (scale(g, c),)

    return _make(value, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, nb = a.ndim, b.ndim
    if na not in (1, 2) or nb not in (1, 2):
        raise ShapeMismatch(f"matmul supports 1-d/2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def vjp(g):
        if na == 2 and nb == 2:
            ga = matmul(g, transpose(b)) if a.requires_grad else None
            gb = matmul(transpose(a), g) if b.requires_grad else None
        elif na == 2 and nb == 1:
            ga = matmul(reshape(g, (a.shape[0], 1)), reshape(b, (1, b.shape[0]))) \
                if a.requires_grad else None
            gb = matmul(transpose(a), g) if b.requires_grad else None
        elif na == 1 and nb == 2:
            ga = matmul(b, g) if a.requires_grad else None
            gb = matmul(reshape(a, (a.shape[0], 1)), reshape(g, (1, b.shape[1]))) \
                if b.requires_grad else None
        else:
            ga = mul(g, b) if a.requires_grad else None
            gb = mul(g, a) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    value = a.value.T

    def vjp(g):
        return (transpose(g),)

    return _make(value, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    value = a.value.reshape(shape)
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _make(value, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    value = np.broadcast_to(a.value, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(value, (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            mid = reshape(g, (1,) * len(in_shape)) if in_shape else g
        elif not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kept = [1 if i in axes else s for i, s in enumerate(in_shape)]
            mid = reshape(g, kept)
        else:
            mid = g
        return (broadcast_to(mid, in_shape),)

    return _make(value, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DomainError("mean over an empty axis")
    return scale(reduce_sum(a, axis=axis), 1.0 / count)


def concat(a, b, axis: int = 0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeMismatch(f"concat rank mismatch: {a.shape} vs {b.shape}")
    value = np.concatenate([a.value, b.value], axis=axis)
    split = a.shape[axis]

    def vjp(g):
        return (narrow(g, axis, 0, split) if a.requires_grad else None,
                narrow(g, axis, split, b.shape[axis]) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    value = a.value[tuple(index)]
    before, after = start, a.shape[axis] - start - length

    def vjp(g):
        out = g
        if before:
            pad_shape = list(g.shape)
            pad_shape[axis] = before
            out = concat(constant(np.zeros(pad_shape)), out, axis)
        if after:
            pad_shape = list(g.shape)
            pad_shape[axis] = after
            out = concat(out, constant(np.zeros(pad_shape)), axis)
        return (out,)

    return _make(value, (a,), vjp)


def gather_rows(a, idx) -> Tensor:
    """Select rows ``a[idx]``; gradients scatter-add back into the source."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather index out of range for {a.shape[0]} rows")
    value = a.value[idx]
    n_rows = a.shape[0]

    def vjp(g):
        return (scatter_rows(g, idx, n_rows),)

    return _make(value, (a,), vjp)


def scatter_rows(v, idx, num_rows: int) -> Tensor:
    v = as_tensor(v)
    idx = np.asarray(idx, dtype=np.intp)
    out_value = np.zeros((num_rows,) + v.shape[1:])
    np.add.at(out_value, idx, v.value)

    def vjp(g):
        return (gather_rows(g, idx),)

    return _make(out_value, (v,), vjp)


class SparseLinear:
    """Constant sparse matrix with its transpose precomputed for backward."""

    __slots__ = ("matrix", "_transposed")

    def __init__(self, matrix: scipy.sparse.csr_matrix, _transposed: "SparseLinear | None" = None):
        self.matrix = scipy.sparse.csr_matrix(matrix)
        self._transposed = _transposed

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def transposed(self) -> "SparseLinear":
        if self._transposed is None:
            self._transposed = SparseLinear(self.matrix.T.tocsr(), _transposed=self)
        return self._transposed


def sparse_matmul(op: SparseLinear, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != op.shape[1]:
        raise ShapeMismatch(f"sparse operator {op.shape} applied to {x.shape}")
    value = op.matrix @ x.value

    def vjp(g):
        return (sparse_matmul(op.transposed(), g),)

    return _make(value, (x,), vjp)


def sparse_message_aggregate(h, e, pick_h: SparseLinear, pick_e: SparseLinear,
                             combine: SparseLinear) -> Tensor:
    """Fused ``combine @ (pick_h @ h + pick_e @ e)``.

    One tape node for the per-layer neighborhood aggregation; the backward
    rule routes the gradient through the three transposed operators.
    """
    h, e = as_tensor(h), as_tensor(e)
    if h.value.shape[0] != pick_h.shape[1] or e.value.shape[0] != pick_e.shape[1]:
        raise ShapeMismatch("message operators do not match state row counts")
    value = combine.matrix @ (pick_h.matrix @ h.value + pick_e.matrix @ e.value)

    def vjp(g):
        mid = sparse_matmul(combine.transposed(), g)
        return (sparse_matmul(pick_h.transposed(), mid) if h.requires_grad else None,
                sparse_matmul(pick_e.transposed(), mid) if e.requires_grad else None)

    return _make(value, (h, e), vjp)


def matmul_t(a, b) -> Tensor:
    """``a @ b.T`` for matrices, fused to avoid a separate transpose node."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
        raise ShapeMismatch(f"matmul_t needs [n,k] @ [m,k].T, got {a.shape}, {b.shape}")
    value = a.value @ b.value.T

    def vjp(g):
        return (matmul(g, b) if a.requires_grad else None,
                matmul(transpose(g), a) if b.requires_grad else None)

    return _make(value, (a, b), vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    value = np.where(a.value > 0, a.value, slope * a.value)
    mask = np.where(a.value > 0, 1.0, slope)

    def vjp(g):
        return (mul(g, constant(mask)),)

    return _make(value, (a,), vjp)


def maximum_const(a, floor: float) -> Tensor:
    a = as_tensor(a)
    value = np.maximum(a.value, floor)
    mask = (a.value > floor).astype(np.float64)

    def vjp(g):
        return (mul(g, constant(mask)),)

    return _make(value, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)
    if not np.isfinite(value).all():
        raise DomainError("exp overflow")

    def vjp(g):
        return (mul(g, out),)

    out = _make(value, (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if not (a.value > 0).all():
        raise DomainError("log of non-positive value")
    value = np.log(a.value)

    def vjp(g):
        return (mul(g, reciprocal(a)),)

    return _make(value, (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if not (a.value >= 0).all():
        raise DomainError("sqrt of negative value")
    value = np.sqrt(a.value)

    def vjp(g):
        return (mul(g, scale(reciprocal(out), 0.5)),)

    out = _make(value, (a,), vjp)
    return out


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if not (a.value != 0).all():
        raise DomainError("reciprocal of zero")
    value = 1.0 / a.value

    def vjp(g):
        return (scale(mul(g, mul(out, out)), -1.0),)

    out = _make(value, (a,), vjp)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (mul(g, mul(out, one_minus(out))),)

    out = _make(value, (a,), vjp)
    return out


def one_minus(a) -> Tensor:
    return add(scale(a, -1.0), constant(1.0))


def linear(x, w, b) -> Tensor:
    """Affine map: ``x @ w.T + b`` for a batch, ``w @ x + b`` for a vector.

    Fused so one tape node covers the projection and bias.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.value.shape[-1] != w.value.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if x.ndim == 1:
        value = w.value @ x.value + b.value
    elif x.ndim == 2:
        value = x.value @ w.value.T + b.value
    else:
        raise ShapeMismatch(f"linear expects a vector or matrix input, got {x.shape}")

    def vjp(g):
        if x.ndim == 1:
            gx = matmul(g, w) if x.requires_grad else None
            gw = matmul(reshape(g, (w.shape[0], 1)),
                        reshape(x, (1, w.shape[1]))) if w.requires_grad else None
            gb = g if b.requires_grad else None
        else:
            gx = matmul(g, w) if x.requires_grad else None
            gw = matmul(transpose(g), x) if w.requires_grad else None
            gb = reduce_sum(g, axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(value, (x, w, b), vjp)


def softmax_cross_entropy_rows(logits, labels) -> Tensor:
    """Per-row cross entropy of softmax(logits [k, C]) against integer labels.

    Fused forward; the backward rule is the classic softmax-minus-one-hot,
    emitted through traced ops so it stays differentiable.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or logits.value.shape[1] == 0:
        raise DomainError(f"expected [k, C] logits with C >= 1, got {logits.shape}")
    k, n_classes = logits.value.shape
    if labels.shape != (k,):
        raise ShapeMismatch(f"{k} logit rows but labels shape {labels.shape}")
    if k and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError("label outside class range")
    x = logits.value
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    value = lse - x[np.arange(k), labels]
    onehot = np.zeros((k, n_classes))
    onehot[np.arange(k), labels] = 1.0
    onehot_t = Tensor(onehot)
    shift_t = Tensor(-m)

    def vjp(g):
        e = exp(add(logits, shift_t))
        probs = mul(e, reciprocal(reduce_sum(e, axis=1, keepdims=True)))
        return (mul(reshape(g, (k, 1)), sub(probs, onehot_t)),)

    return _make(value, (logits,), vjp)


def sigmoid_bce(scores, labels) -> Tensor:
    """Elementwise binary cross entropy on sigmoid(scores), log-args floored
    at 1e-12. Fused forward with an exact traced backward rule."""
    scores = as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != scores.value.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {y.shape}")
    s = scores.value
    p = np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))),
                 np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))
    floor = 1e-12
    value = -(y * np.log(np.maximum(p, floor)) + (1.0 - y) * np.log(np.maximum(1.0 - p, floor)))
    # where a log argument is floored its branch contributes zero gradient
    coeff_pos = Tensor(y * (p > floor))
    coeff_neg = Tensor((1.0 - y) * (1.0 - p > floor))

    def vjp(g):
        prob = sigmoid(scores)
        slope = sub(mul(coeff_neg, prob), mul(coeff_pos, one_minus(prob)))
        return (mul(g, slope),)

    return _make(value, (scores,), vjp)


# ---------------------------------------------------------------------------
# composites


def inner(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"inner product needs equal-length vectors, got {a.shape}, {b.shape}")
    return reduce_sum(mul(a, b))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = constant(-a.value.max(axis=axis, keepdims=True))
    e = exp(add(a, shift))
    return mul(e, reciprocal(reduce_sum(e, axis=axis, keepdims=True)))


def cross_entropy(logits, label: int) -> Tensor:
    """Multi-class cross entropy of softmax(logits) against an integer label."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise DomainError(f"cross_entropy needs a non-empty logit vector, got shape {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= label < n_classes:
        raise DomainError(f"label {label} outside [0, {n_classes})")
    m = float(logits.value.max())
    lse = add(log(reduce_sum(exp(add(logits, constant(-m))))), constant(m))
    picked = reduce_sum(narrow(logits, 0, label, 1))
    return sub(lse, picked)


def cross_entropy_rows(logits, labels) -> Tensor:
    """Row-wise cross entropy: logits [k, C] against integer labels [k]."""
    return softmax_cross_entropy_rows(logits, labels)


def binary_cross_entropy(score, label) -> Tensor:
    """Elementwise BCE on sigmoid(score); log arguments floored at 1e-12."""
    score = as_tensor(score)
    y = np.asarray(label, dtype=np.float64)
    return sigmoid_bce(score, np.broadcast_to(y, score.value.shape))


def l2_normalize(a) -> Tensor:
    """Normalize a vector to unit length; the zero vector maps to itself
    with zero gradient (documented singularity)."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeMismatch(f"l2_normalize expects a vector, got shape {a.shape}")
    sq = reduce_sum(mul(a, a))
    if float(sq.value) == 0.0:
        return scale(a, 0.0)
    return mul(a, reciprocal(sqrt(sq)))


def l2_normalize_rows(a) -> Tensor:
    """Row-wise L2 normalization; all-zero rows stay zero with zero gradient.

    Fused forward; the backward rule re-derives the row norms through traced
    ops so second-order gradients stay exact.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    sq_val = (a.value * a.value).sum(axis=1, keepdims=True)
    mask = (sq_val > 0).astype(np.float64)
    inv_val = mask / np.sqrt(sq_val + (1.0 - mask))
    value = a.value * inv_val
    mask_t = Tensor(mask)
    pad_t = Tensor(1.0 - mask)

    def vjp(g):
        sq = reduce_sum(mul(a, a), axis=1, keepdims=True)
        inv = mul(reciprocal(sqrt(add(sq, pad_t))), mask_t)
        y = mul(a, inv)
        along = reduce_sum(mul(g, y), axis=1, keepdims=True)
        return (mul(sub(g, mul(y, along)), inv),)

    return _make(value, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, root: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Accumulate gradients of a scalar root for every tensor reachable on the tape.

    With ``create_graph`` the emitted gradient computations are recorded too,
    so the returned gradients can be differentiated further.
    """
    if root.size != 1:
        raise NonScalarRoot(f"backward root must be scalar-shaped, got {root.shape}")
    grads: dict[Tensor, Tensor] = {root: constant(np.ones_like(root.value))}
    if root.op is None:
        tape.gradients = grads
        return grads
    context = tape if create_graph else None
    _STACK.stack.append(context)
    try:
        for i in range(root.node_id, -1, -1):
            op = tape.ops[i]
            g = grads.get(op.output)
            if g is None:
                continue
            in_grads = op.vjp(g)
            for inp, ig in zip(op.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else add(prev, ig)
    finally:
        _STACK.stack.pop()
    tape.gradients = grads
    return grads


class ParameterSet:
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self, entries: dict[str, Tensor] | Iterable[tuple[str, Tensor]]):
        self._entries: dict[str, Tensor] = {}
        items = entries.items() if isinstance(entries, dict) else entries
        for name, tensor in items:
            if name in self._entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._entries[name] = tensor

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParameterSet":
        return cls({name: Tensor(np.array(a, dtype=np.float64), requires_grad=True)
                    for name, a in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._entries.values())

    def clone(self) -> "ParameterSet":
        return ParameterSet({name: Tensor(t.value.copy(), requires_grad=True)
                             for name, t in self._entries.items()})

    def equals_bitwise(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].value, other[n].value) for n in self.names())


def grads_for(params: ParameterSet, grad_map: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
    """Extract per-name gradient arrays; unreachable parameters get zeros."""
    out = {}
    for name, tensor in params.items():
        g = grad_map.get(tensor)
        out[name] = g.value if g is not None else np.zeros_like(tensor.value)
    return out


def grad_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
               step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error denominators are floored at 1e-8.
    """
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.value).all():
        raise NonFiniteFunction("objective is not finite at the given point")
    analytic = grads_for(params, backward(tape, loss))

    def evaluate() -> float:
        with no_trace():
            v = float(f(params).value)
        if not np.isfinite(v):
            raise NonFiniteFunction("objective not finite during finite differencing")
        return v

    worst = 0.0
    for name, tensor in params.items():
        array = tensor.value
        grad = analytic[name]
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            f_plus = evaluate()
            array[index] = original - step
            f_minus = evaluate()
            array[index] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = grad[index]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
    return worst


def second_order_trace(inner_loss: Callable[[ParameterSet], Tensor],
                       outer_loss: Callable[[ParameterSet], Tensor],
                       params: ParameterSet, alpha: float,
                       mode: GradMode | None) -> dict[str, np.ndarray]:
    """Gradient of ``outer_loss`` through one inner gradient step.

    SECOND_ORDER differentiates the composition
    ``outer_loss(theta - alpha * grad inner_loss(theta))`` exactly, including
    the Hessian-vector term. FIRST_ORDER evaluates the outer gradient at the
    updated parameters, with the gradient stopped through the inner step.
    """
    if mode is None:
        raise ModeUnset("meta-gradient mode must be FIRST_ORDER or SECOND_ORDER")
    if mode is GradMode.SECOND_ORDER:
        with Tape() as tape:
            li = inner_loss(params)
            inner_grads = backward(tape, li, create_graph=True)
            adapted_entries = {}
            for name, t in params.items():
                g = inner_grads.get(t)
                adapted_entries[name] = t if g is None else sub(t, scale(g, alpha))
            adapted = ParameterSet(adapted_entries)
            lo = outer_loss(adapted)
        outer_grads = backward(tape, lo)
        return grads_for(params, outer_grads)

    with Tape() as tape:
        li = inner_loss(params)
    inner_vals = grads_for(params, backward(tape, li))
    adapted = ParameterSet({name: Tensor(t.value - alpha * inner_vals[name], requires_grad=True)
                            for name, t in params.items()})
    with Tape() as tape2:
        lo = outer_loss(adapted)
    outer_vals = grads_for(adapted, backward(tape2, lo))
    return {name: outer_vals[name] for name in params.names()}
