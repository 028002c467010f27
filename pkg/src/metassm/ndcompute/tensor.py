"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when
at least one input is differentiable (a ``requires_grad`` leaf or the output
of an operation already on that tape).  ``tape.backward(loss)`` replays the
record in exact reverse order and accumulates ``d loss / d leaf`` into each
leaf's ``grad``.  Outside a tape, operations only compute values.

Every operation checks its output for NaN/Inf and raises
:class:`~metassm.errors.NumericError` instead of letting them propagate.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError, UsageError

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float64)


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors in this thread."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _local.dtype = dtype.type


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward", "grad", "tape", "name")

    def __init__(self, out, parents, backward, tape, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.tape = tape
        self.name = name
        self.grad = None


class Tensor:
    """A dense real array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise ContractError("only integer power 2 is supported; use exp/log")

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=default_dtype()))


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ``backward`` may be called once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise UsageError("tape already consumed by a backward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def op_names(self) -> list[str]:
        return [n.name for n in self._nodes]

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or (t._node is not None and t._node.tape is self)

    def _record(self, out: Tensor, parents: tuple, backward: Callable, name: str) -> None:
        node = _Node(out, parents, backward, self, name)
        out._node = node
        self._nodes.append(node)

    def backward(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into every differentiable leaf's ``grad``.

        ``visit`` is called with each replayed op name (used to check ordering).
        """
        if self._consumed:
            raise UsageError("second backward pass on the same tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
            raise ContractError("backward requires a scalar loss tensor")
        self._consumed = True
        node = loss._node
        if node is None or node.tape is not self:
            # loss does not depend on anything differentiable on this tape
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            self._release()
            return
        node.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            if visit is not None:
                visit(node.name)
            needs = tuple(self._tracks(p) for p in node.parents)
            grads = node.backward(g, needs)
            for p, need, pg in zip(node.parents, needs, grads):
                if not need or pg is None:
                    continue
                pnode = p._node
                if pnode is not None and pnode.tape is self:
                    pnode.grad = pg if pnode.grad is None else pnode.grad + pg
                else:
                    _accumulate_leaf(p, pg)
        self._release()

    def _release(self) -> None:
        for node in self._nodes:
            node.out._node = None
            node.parents = ()
            node.backward = None
            node.grad = None
        self._nodes = []


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def apply_op(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active tape if needed.

    ``backward(g, needs)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output in {name}")
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if tape._tracks(p):
                tape._record(out, tuple(parents), backward, name)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return apply_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return apply_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return apply_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g, needs):
        return (_unbroadcast(g / bd, ad.shape) if needs[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None)

    return apply_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.data, (a,), lambda g, needs: (-g,), "neg")


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; ``a`` may be a vector."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim < 2 or a.ndim < 1:
        raise DimensionError(f"matmul: right operand must be a matrix, got shape {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None
    ad, bd = a.data, b.data

    def bw(g, needs):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        g2 = g[..., None, :] if ad.ndim == 1 else g
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(bd, -1, -2)), a2.shape).reshape(ad.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), bd.shape)
        return ga, gb

    return apply_op(out, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose needs at least 2 dimensions")
    return apply_op(np.swapaxes(a.data, -1, -2), (a,),
                    lambda g, needs: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return apply_op(out, (a,), lambda g, needs: (g.reshape(src),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {exc}") from None
    return apply_op(out, (a,), lambda g, needs: (_unbroadcast(g, src),), "broadcast_to")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise ContractError("index with numpy arrays or slices, not tensors")
    out = a.data[idx]
    src, dtype = a.shape, a.data.dtype

    def bw(g, needs):
        ga = np.zeros(src, dtype=dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return apply_op(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, splits, axis=ax))

    return apply_op(out, tuple(ts), bw, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack of an empty list")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None
    ax = axis % out.ndim

    def bw(g, needs):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return apply_op(out, tuple(ts), bw, "stack")


# reductions -------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return apply_op(out, (a,), lambda g, needs: (_expand_reduced(g, src, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / max(out.size, 1)

    def bw(g, needs):
        return (_expand_reduced(g / n, src, axis, keepdims),)

    return apply_op(out, (a,), bw, "mean")


def mean_over_axis(a, axis: int) -> Tensor:
    return mean(a, axis=axis)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = np.log(tot) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = s / tot

    def bw(g, needs):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return apply_op(np.asarray(out), (a,), bw, "logsumexp")


# elementwise unary --------------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return apply_op(y, (a,), lambda g, needs: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return apply_op(a.data * mask, (a,), lambda g, needs: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return apply_op(y, (a,), lambda g, needs: (g * y * (1.0 - y),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    return apply_op(np.logaddexp(0.0, x), (a,), lambda g, needs: (g * _sigmoid(x),), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return apply_op(y, (a,), lambda g, needs: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return apply_op(y, (a,), lambda g, needs: (g / x,), "log")


def sqrt(a) -> Tensor:
    """Square root with the subgradient 0 at exactly 0."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)

    def bw(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),)

    return apply_op(y, (a,), bw, "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op(x * x, (a,), lambda g, needs: (2.0 * g * x,), "square")


_POINTWISE = {
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "neg": neg,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "mean_over_axis": mean_over_axis,
}


def pointwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch a named elementwise/structural op (``pointwise("tanh", x)``)."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ContractError(f"unknown pointwise op {op!r}") from None
    return fn(*args, **kwargs)
