"""Reverse-mode autodiff over float64 numpy arrays.

Every op that touches an array with ``requires_grad`` appends a node to the
active :class:`Tape`. :func:`backward` walks that tape once in reverse,
accumulating gradients into leaves, and then frees it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an op is called with arguments that violate its contract."""


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so inputs always precede the nodes that
    consume them. A tape can be entered several times as a context manager;
    :func:`backward` clears it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def record(self, op: str, inputs: tuple, backward: Callable) -> int:
        self.nodes.append(_Node(op, inputs, backward))
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
        _local.grad_enabled = True
    return _local.stack


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextmanager
def no_grad():
    """Evaluate ops without recording anything."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class DiffArray:
    """N-d float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100.0
    __slots__ = ("values", "requires_grad", "grad", "node_id", "_tape", "_gen", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self._gen = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values.item())

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "DiffArray":
        return DiffArray(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self.node_id is None

    # operator sugar
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
        if isinstance(other, DiffArray):
            raise ContractError("division by a DiffArray is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def log(self):
        return log(self)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _live(x: DiffArray) -> bool:
    """True when x is a recorded intermediate whose tape has not been freed."""
    return x.node_id is not None and x._tape is not None and x._gen == x._tape.generation


def _tracked(x: DiffArray) -> bool:
    return x.requires_grad and (x.node_id is None or _live(x))


def make_result(op: str, values: np.ndarray, inputs: Sequence[DiffArray], backward: Callable) -> DiffArray:
    """Wrap ``values`` and record ``backward`` on the active tape if needed.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = DiffArray.__new__(DiffArray)
    out.values = values
    out.grad = None
    out.name = None
    out.node_id = None
    out._tape = None
    out._gen = -1
    out.requires_grad = False
    if grad_enabled() and any(_tracked(x) for x in inputs):
        tape = current_tape()
        out.requires_grad = True
        out.node_id = tape.record(op, tuple(inputs), backward)
        out._tape = tape
        out._gen = tape.generation
    return out


def backward(root: DiffArray, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The tape is cleared afterwards, so intermediates recorded on it become
    constants for any later use.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root.node_id is None:
        _accumulate_leaf(root, np.ones_like(root.values))
        return
    if not _live(root):
        raise ContractError("root belongs to a tape that was already freed")
    tape = tape or root._tape
    if tape is not root._tape:
        raise ContractError("root was not recorded on the given tape")

    grads: list = [None] * (root.node_id + 1)
    grads[root.node_id] = np.ones_like(root.values)
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        node = tape.nodes[i]
        in_grads = node.backward(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if x.node_id is None:
                _accumulate_leaf(x, gx)
            elif x._tape is tape and x._gen == tape.generation:
                grads[x.node_id] = gx if grads[x.node_id] is None else grads[x.node_id] + gx
            elif _live(x):
                raise ContractError(f"{node.op} consumed an intermediate recorded on another tape")
            # intermediates from freed tapes are treated as constants
    tape.clear()


def _accumulate_leaf(x: DiffArray, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != x.values.shape:
        g = _unbroadcast(g, x.values.shape)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient for {x.name or 'leaf'}")
    x.grad = g.copy() if x.grad is None else x.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", av * bv, (a, b), bw)


def square(x) -> DiffArray:
    x = as_diff(x)
    v = x.values
    return make_result("square", v * v, (x,), lambda g: (2.0 * v * g,))


def absolute(x) -> DiffArray:
    # sign(0) == 0, so |x - y| has zero derivative at ties
    x = as_diff(x)
    v = x.values
    return make_result("abs", np.abs(v), (x,), lambda g: (np.sign(v) * g,))


def log(x) -> DiffArray:
    x = as_diff(x)
    v = x.values
    if np.any(v <= 0):
        raise ContractError("log of a nonpositive value; add a floor before taking the log")
    return make_result("log", np.log(v), (x,), lambda g: (g / v,))


def sqrt(x) -> DiffArray:
    x = as_diff(x)
    v = x.values
    if np.any(v <= 0):
        raise ContractError("sqrt needs strictly positive input")
    out = np.sqrt(v)
    return make_result("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    s = _sigmoid(x.values)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> DiffArray:
    x = as_diff(x)
    mask = x.values > 0
    return make_result("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.1) -> DiffArray:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_diff(x)
    pos = x.values > 0
    scale = np.where(pos, 1.0, slope)
    return make_result("leaky_relu", x.values * scale, (x,), lambda g: (g * scale,))


# reductions and shape ---------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> DiffArray:
    x = as_diff(x)
    shape = x.shape
    out = np.asarray(x.values.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return make_result("sum", out, (x,), lambda g: (_expand(g, shape, axis, keepdims),))


def reduce_mean(x, axis=None, keepdims=False) -> DiffArray:
    x = as_diff(x)
    shape = x.shape
    out = np.asarray(x.values.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    n = x.size // max(out.size, 1)
    return make_result("mean", out, (x,), lambda g: (_expand(g, shape, axis, keepdims) / n,))


def reshape(x, shape) -> DiffArray:
    x = as_diff(x)
    old = x.shape
    return make_result("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> DiffArray:
    x = as_diff(x)
    inv = None if axes is None else np.argsort(axes)
    return make_result(
        "transpose", x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),)
    )


def getitem(x, index) -> DiffArray:
    x = as_diff(x)
    shape = x.shape

    basic = all(
        isinstance(i, (slice, int, type(Ellipsis), type(None)))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def bw(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result("getitem", np.array(x.values[index]), (x,), bw)


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]
    return make_result(
        "concat",
        np.concatenate([a.values for a in arrays], axis=axis),
        tuple(arrays),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def pad_last(x, left: int, right: int, mode: str = "constant") -> DiffArray:
    """Pad the last axis with zeros (``constant``) or by reflection."""
    x = as_diff(x)
    n = x.shape[-1]
    if left < 0 or right < 0:
        raise ContractError("padding must be nonnegative")
    if mode == "constant":
        out = np.pad(x.values, [(0, 0)] * (x.ndim - 1) + [(left, right)])

        def bw(g):
            return (g[..., left:left + n],)

        return make_result("pad", out, (x,), bw)
    if mode != "reflect":
        raise ContractError(f"unknown pad mode {mode!r}")
    idx = np.pad(np.arange(n), (left, right), mode="reflect")
    out = x.values[..., idx]

    def bw(g):
        gx = g[..., left:left + n].copy()
        edge = np.concatenate([np.arange(left), np.arange(left + n, left + n + right)])
        if edge.size:
            gt = np.moveaxis(gx, -1, 0)
            np.add.at(gt, idx[edge], np.moveaxis(g[..., edge], -1, 0))
        return (gx,)

    return make_result("pad_reflect", out, (x,), bw)


def frame(x, window: int, hop: int) -> DiffArray:
    """Slice the last axis into windows: ``[..., n] -> [..., frames, window]``."""
    x = as_diff(x)
    n = x.shape[-1]
    if window > n:
        raise ContractError(f"window {window} longer than signal {n}")
    count = 1 + (n - window) // hop
    view = np.lib.stride_tricks.sliding_window_view(x.values, window, axis=-1)
    out = np.ascontiguousarray(view[..., ::hop, :][..., :count, :])

    def bw(g):
        gx = np.zeros(x.shape)
        if window % hop == 0:
            lead = g.shape[:-2]
            for j in range(window // hop):
                block = g[..., j * hop:(j + 1) * hop].reshape(lead + (count * hop,))
                gx[..., j * hop:j * hop + count * hop] += block
        else:
            for t in range(count):
                gx[..., t * hop:t * hop + window] += g[..., t, :]
        return (gx,)

    return make_result("frame", out, (x,), bw)


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")
    av, bv = a.values, b.values

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", av @ bv, (a, b), bw)
