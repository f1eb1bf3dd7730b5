"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
backward rule.  :func:`backward` linearises the graph into a :class:`Tape`
(topological order) and replays it in reverse, accumulating gradients into
leaf tensors.  Inputs are never mutated.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError

DEBUG = bool(os.environ.get("MSGAT_DEBUG"))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from {op}")
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(out, (a,), bw, "pow")


def matmul(a, b) -> Tensor:
    """Matrix product (batched over leading dims like ``np.matmul``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        A, B = a.data, b.data
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * B
            if b.requires_grad:
                gb = np.tensordot(g, A, axes=(tuple(range(g.ndim)), tuple(range(A.ndim - 1))))
            return ga, gb
        if a.ndim == 1:
            if a.requires_grad:
                ga = np.matmul(B, g[..., None])[..., 0]
                ga = ga.reshape(-1, A.shape[0]).sum(axis=0) if ga.ndim > 1 else ga
            if b.requires_grad:
                gb = _unbroadcast(A[:, None] * g[..., None, :], b.shape)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


# -- reductions and shape ops ------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return Tensor._result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._result(np.transpose(a.data, axes), (a,), bw, "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


class _SliceGrad:
    """Gradient for a slice of a parent; scattered in place during backward."""

    __slots__ = ("index", "g")

    def __init__(self, index, g):
        self.index = index
        self.g = g


def getitem(a, index) -> Tensor:
    """Basic indexing (ints and slices only)."""
    a = as_tensor(a)

    def bw(g):
        return (_SliceGrad(index, g),)

    return Tensor._result(a.data[index], (a,), bw, "getitem")


def _segment_matrix(seg: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(seg)
    return sp.csr_matrix((np.ones(n), (seg, np.arange(n))), shape=(num_segments, n))


def segment_sum_np(x: np.ndarray, seg: np.ndarray, num_segments: int, axis: int = 0) -> np.ndarray:
    """Sum slices of ``x`` along ``axis`` into ``num_segments`` buckets."""
    moved = np.moveaxis(x, axis, 0)
    rest = moved.shape[1:]
    flat = moved.reshape(moved.shape[0], -1)
    summed = _segment_matrix(seg, num_segments) @ flat
    return np.moveaxis(np.asarray(summed).reshape((num_segments,) + rest), 0, axis)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices ``index`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim

    def bw(g):
        return (segment_sum_np(g, index, a.shape[axis], axis),)

    return Tensor._result(np.take(a.data, index, axis=axis), (a,), bw, "take")


def segment_sum(a, seg, num_segments: int, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    axis = axis % a.ndim
    if len(seg) != a.shape[axis]:
        raise DimensionError(f"segment ids length {len(seg)} != axis size {a.shape[axis]}")

    def bw(g):
        return (np.take(g, seg, axis=axis),)

    return Tensor._result(segment_sum_np(a.data, seg, num_segments, axis), (a,), bw, "segment_sum")


def segment_softmax(scores, segments, num_segments: int | None = None, axis: int = 0) -> Tensor:
    """Softmax of ``scores`` within each segment along ``axis``.

    Each segment is shifted by its own maximum before exponentiation.
    Empty input gives empty output.
    """
    scores = as_tensor(scores)
    seg = np.asarray(segments, dtype=np.int64)
    axis = axis % max(scores.ndim, 1)
    if scores.size == 0:
        return Tensor._result(scores.data.copy(), (scores,), lambda g: (g,), "segment_softmax")
    if len(seg) != scores.shape[axis]:
        raise DimensionError(f"segments length {len(seg)} != axis size {scores.shape[axis]}")
    n = int(seg.max()) + 1 if num_segments is None else num_segments

    moved = np.moveaxis(scores.data, axis, 0)
    order = np.argsort(seg, kind="stable")
    s_sorted = seg[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    seg_max = np.zeros((n,) + moved.shape[1:])
    seg_max[s_sorted[starts]] = np.maximum.reduceat(moved[order], starts, axis=0)
    e = np.exp(moved - seg_max[seg])
    denom = segment_sum_np(e, seg, n, 0)
    out = np.moveaxis(e / denom[seg], 0, axis)

    def bw(g):
        gy = g * out
        return (gy - out * np.take(segment_sum_np(gy, seg, n, axis), seg, axis=axis),)

    return Tensor._result(out, (scores,), bw, "segment_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * out
        return (gy - out * gy.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), bw, "softmax")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}"
            )
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat"
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    axis = axis % a.ndim
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


# -- pointwise functions -----------------------------------------------
def _unary(a, value, deriv, op):
    a = as_tensor(a)

    def bw(g):
        return (g * deriv,)

    return Tensor._result(value, (a,), bw, op)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # overflow-free form of 1 / (1 + exp(-x))
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, out, out * (1.0 - out), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, 1.0 - out * out, "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), mask.astype(np.float64), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, slope * a.data), np.where(mask, 1.0, slope), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    return _unary(a, np.where(mask, a.data, neg), np.where(mask, 1.0, neg + alpha), "elu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, out, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), 1.0 / a.data, "log")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), inside.astype(np.float64), "clip")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
}


def elementwise(x, fn: str) -> Tensor:
    try:
        return ACTIVATIONS[fn](x)
    except KeyError:
        raise ContractError(f"unknown activation {fn!r}; expected one of {sorted(ACTIVATIONS)}") from None


# -- tape and backward -------------------------------------------------
@dataclass
class Tape:
    """Operations reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients of intermediate tensors are transient; only leaves (tensors
    created by the user with ``requires_grad=True``) keep ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # buffers safe to update in place
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if isinstance(pg, _SliceGrad):
                if key not in grads:
                    grads[key] = np.zeros(parent.shape)
                elif key not in owned:
                    grads[key] = grads[key].copy()
                owned.add(key)
                grads[key][pg.index] += pg.g
            elif key in grads:
                grads[key] = grads[key] + pg
                owned.add(key)
            else:
                grads[key] = pg
    return tape


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|).

    ``x`` is a Tensor or a list of Tensors; ``f`` maps them to a scalar.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if not isinstance(x, Tensor) else f(x)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float((f(*xs) if not isinstance(x, Tensor) else f(x)).data)
            flat[i] = orig - eps
            down = float((f(*xs) if not isinstance(x, Tensor) else f(x)).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
