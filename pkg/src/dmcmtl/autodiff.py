"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a new :class:`Tensor` holding its value, its parents and a
vector-Jacobian product.  Ops whose inputs are all constants return plain
constants, so a rollout over constant inputs costs no graph bookkeeping.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.sum(x * x)
    ad.backward(y)
    x.grad  # array([2., 4.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "as_tensor", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "stack", "getitem",
    "reshape", "sum", "mean", "minimum", "maximum", "clamp", "tanh", "sigmoid",
    "relu", "softmax", "log_softmax", "log", "exp", "square", "where_select", "cumsum",
]

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A node of the differentiation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf" if requires_grad else "const"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor({self.value!r}, op={self.op})"

    def __len__(self) -> int:
        return len(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


class Tape:
    """Records every graph node created while it is active.

    Used as a context manager around one forward pass; :meth:`clear` cuts the
    recorded nodes loose from their parents so the graph can be freed.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._vjp = None
        self.nodes = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        for tape in _ACTIVE_TAPES:
            tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ZeroDivisionError("division by zero in graph")
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    sa, sb = a.value.shape, b.value.shape
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
                 "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value >= b.value
    sa, sb = a.value.shape, b.value.shape
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
                 "maximum")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to constant bounds; gradient is 1 strictly inside, 0 elsewhere."""
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    x = as_tensor(x)
    inside = (x.value > lo) & (x.value < hi)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def where_select(cond, a, b) -> Tensor:
    """``out[i] = a[i] if cond[i] else b[i]`` with gradients routed by ``cond``."""
    cond = np.asarray(cond.value if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    # raises on incompatible shapes
    np.broadcast_shapes(cond.shape, a.value.shape, b.value.shape)
    sa, sb = a.value.shape, b.value.shape
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)),
                 "where")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    return _node(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise ValueError("log of non-positive value")
    xv = x.value
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value - x.value.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _node(out, (x,),
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, _Outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), vjp, "matmul")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(x.value.sum(axis=axis)), (x,), vjp, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def cumsum(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(x.value, axis=axis), (x,), vjp, "cumsum")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(idx)
    return _node(np.asarray(x.value[idx]), (x,), lambda g: (_Slice(idx, g, basic),), "getitem")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)
    return _node(np.stack([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- backward

class _Slice:
    """Gradient that lands in one slice of the parent."""
    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g, basic):
        self.idx, self.g, self.basic = idx, g, basic


class _Outer:
    """Deferred ``outer(a, g)``; many of these sum to one matmul."""
    __slots__ = ("a", "g")

    def __init__(self, a, g):
        self.a, self.g = a, g


class _Accumulator:
    __slots__ = ("shape", "dense", "owned", "outer_a", "outer_g")

    def __init__(self, shape):
        self.shape = shape
        self.dense = None
        self.owned = False
        self.outer_a: list = []
        self.outer_g: list = []

    def _own(self):
        if self.dense is None:
            self.dense = np.zeros(self.shape)
        elif not self.owned:
            self.dense = np.array(self.dense, dtype=np.float64)
        self.owned = True

    def add(self, contrib) -> None:
        if isinstance(contrib, _Slice):
            self._own()
            if contrib.basic:
                self.dense[contrib.idx] += contrib.g
            else:
                np.add.at(self.dense, contrib.idx, contrib.g)
        elif isinstance(contrib, _Outer):
            self.outer_a.append(contrib.a)
            self.outer_g.append(contrib.g)
        elif self.dense is None:
            self.dense = contrib
        elif self.owned:
            self.dense += contrib
        else:
            self.dense = self.dense + contrib
            self.owned = True

    def total(self) -> np.ndarray:
        g = self.dense
        if self.outer_a:
            outer = np.stack(self.outer_a).T @ np.stack(self.outer_g)
            g = outer if g is None else g + outer
        return np.zeros(self.shape) if g is None else np.asarray(g).reshape(self.shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = {id(root)}
    stack_ = [(root, iter(root._parents))]
    while stack_:
        node, parents = stack_[-1]
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack_.append((p, iter(p._parents)))
                break
        else:
            stack_.pop()
            order.append(node)
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients accumulate across calls; intermediate gradients are
    recomputed each call.  Returns a map ``id(leaf) -> gradient`` for the
    leaves reached.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return {}
    acc = _Accumulator(root.value.shape)
    acc.add(np.ones_like(root.value))
    pending: dict[int, _Accumulator] = {id(root): acc}
    reached: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        acc = pending.pop(id(node), None)
        if acc is None:
            continue
        g = acc.total()
        if node._vjp is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            reached[id(node)] = node.grad
            continue
        node.grad = g
        for parent, contrib in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pacc = pending.get(key)
            if pacc is None:
                pacc = pending[key] = _Accumulator(parent.value.shape)
            pacc.add(contrib)
    return reached


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a :class:`Tensor` shaped like ``x`` to a scalar.  Returns
    ``inf`` when any value is non-finite or the arithmetic fails.
    """
    x0 = np.array(x, dtype=np.float64)
    try:
        leaf = Tensor(x0.copy(), requires_grad=True)
        backward(f(leaf))
        analytic = leaf.grad.ravel()
        numeric = np.empty(x0.size)
        for i in range(x0.size):
            xp, xm = x0.copy().ravel(), x0.copy().ravel()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric[i] = (fp - fm) / (2 * eps)
    except ArithmeticError:
        return float("inf")
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    if x0.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
