"""Reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are built eagerly: every operation computes its value on
construction and records its parents plus a backward rule.  Backward
rules are written with the same differentiable operations, so the
gradients returned by :func:`gradient` with ``create_graph=True`` are
themselves graph nodes and can be differentiated again.

Elementwise operations require equal shapes, or one operand of shape
``()``.  Any other broadcast has to be spelled out with :func:`expand`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "NonScalarError",
    "constant",
    "variable",
    "as_node",
    "no_grad",
    "grad_enabled",
    "eval_graph",
    "gradient",
    "finite_diff",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sin",
    "cos",
    "exp",
    "sigmoid",
    "square",
    "total",
    "sum_axis",
    "mean",
    "reshape",
    "transpose",
    "expand",
    "stack",
    "index",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class NonScalarError(ValueError):
    """Differentiation was requested from a non-scalar root."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing created inside records provenance."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    """Record provenance again, e.g. for a local gradient inside ``no_grad``."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """A value in a differentiable computation graph."""

    __slots__ = ("value", "parents", "backward", "op", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward=None, op="const", requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return total(self) if axis is None else sum_axis(self, axis)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def constant(x) -> Node:
    """Wrap ``x`` as a float64 node that never receives gradients."""
    if isinstance(x, Node):
        return x
    return Node(_freeze(np.array(x, dtype=np.float64)))


def variable(x) -> Node:
    """Wrap ``x`` as a leaf that gradients can be taken with respect to."""
    if isinstance(x, Node):
        x = x.value
    return Node(_freeze(np.array(x, dtype=np.float64)), requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward, op) -> Node:
    value = np.asarray(value, dtype=np.float64)
    # a single reduction catches NaN/Inf; the exact check only runs on failure
    if not np.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: non-finite result")
    _freeze(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward, op, True)
    return Node(value, op=op)


def eval_graph(root) -> np.ndarray:
    """Forward value of ``root`` (graphs are evaluated eagerly)."""
    return as_node(root).value


# ---------------------------------------------------------------- elementwise


def _check_pair(op, a: Node, b: Node):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is scalar")


def _unbroadcast(g: Node, target: Node) -> Node:
    # Undo scalar-with-tensor broadcasting in a backward rule.
    if target.ndim == 0 and g.ndim != 0:
        return total(g)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair("add", a, b)

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(neg(g), b)

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair("mul", a, b)

    def backward(g):
        return _unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)

    return _make(a.value * b.value, (a, b), backward, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair("div", a, b)

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make(a.value / b.value, (a, b), backward, "div")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def sin(a) -> Node:
    a = as_node(a)
    return _trig(a, np.sin(a.value), True)


def cos(a) -> Node:
    a = as_node(a)
    return _trig(a, np.cos(a.value), False)


def _trig(a: Node, value, is_sin: bool, sibling: Node | None = None) -> Node:
    # d sin = cos and d cos = -sin: each node builds its partner at most once
    # and hands itself over, so nested backward passes reuse the forward value.
    pair = [sibling]

    def backward(g):
        stale = pair[0] is not None and _GRAD_ENABLED and a.requires_grad and not pair[0].requires_grad
        if pair[0] is None or stale:
            val = np.cos(a.value) if is_sin else np.sin(a.value)
            pair[0] = _trig(a, val, not is_sin, out)
        d = pair[0]
        return (mul(g, d) if is_sin else neg(mul(g, d)),)

    out = _make(value, (a,), backward, "sin" if is_sin else "cos")
    return out


def exp(a) -> Node:
    a = as_node(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), backward, "exp")
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    # split by sign keeps exp from overflowing
    v = a.value
    e = np.exp(-np.abs(v))
    val = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _make(val, (a,), backward, "sigmoid")
    return out


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (mul(g, mul(2.0, a)),), "square")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a) -> Node:
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.value.T, (a,), lambda g: (transpose(g),), "transpose")


def total(a) -> Node:
    """Sum of all entries, shape ``()``."""
    a = as_node(a)
    shape = a.shape
    return _make(a.value.sum(), (a,), lambda g: (expand(g, shape),), "sum")


def sum_axis(a, axis) -> Node:
    a = as_node(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (expand(reshape(g, kept), shape),)

    return _make(a.value.sum(axis=axes), (a,), backward, "sum_axis")


def mean(a, axis=None) -> Node:
    a = as_node(a)
    if axis is None:
        return mul(total(a), 1.0 / a.value.size)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_axis(a, axes), 1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        val = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}: {exc}") from None
    return _make(val, (a,), lambda g: (reshape(g, old),), "reshape")


def expand(a, shape) -> Node:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        val = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        s = sum_axis(g, axes) if axes else g
        return (reshape(s, src),)

    return _make(val, (a,), backward, "expand")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    ax = axis % (nodes[0].ndim + 1)

    def backward(g):
        return tuple(index(g, (slice(None),) * ax + (i,)) for i in range(len(nodes)))

    return _make(np.stack([n.value for n in nodes], axis=ax), tuple(nodes), backward, "stack")


def index(a, key) -> Node:
    """Basic (non-fancy) or integer-array indexing ``a[key]``."""
    a = as_node(a)
    shape = a.shape

    def backward(g):
        return (_scatter(g, key, shape),)

    return _make(a.value[key], (a,), backward, "index")


def _scatter(g: Node, key, shape) -> Node:
    # Adjoint of index: zeros of ``shape`` with ``g`` added at ``key``.
    out = np.zeros(shape)
    np.add.at(out, key, g.value)
    return _make(out, (g,), lambda gg: (index(gg, key),), "scatter")


# ---------------------------------------------------------------- differentiation


def _toposort(root: Node) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def gradient(root, wrt: Sequence[Node], create_graph: bool = True) -> list:
    """Gradients of scalar ``root`` with respect to each node in ``wrt``.

    With ``create_graph`` the results carry provenance and can be fed
    back into further differentiation.  Nodes that ``root`` does not
    depend on get zero gradients.
    """
    root = as_node(root)
    if root.shape != ():
        raise NonScalarError(f"gradient: root must have shape (), got {root.shape}")
    wrt = list(wrt)
    keep = {id(w) for w in wrt}
    grads: dict = {}
    if root.requires_grad:
        order = _toposort(root)
        # only nodes downstream of some wrt node can carry a useful gradient
        live = set(keep)
        for node in order:
            if any(id(p) in live for p in node.parents):
                live.add(id(node))
        ctx = contextlib.nullcontext() if create_graph else no_grad()
        with ctx:
            grads[id(root)] = constant(1.0)
            for node in reversed(order):
                key = id(node)
                g = grads.get(key) if key in keep else grads.pop(key, None)
                if g is None or node.backward is None or key not in live:
                    continue
                if not any(id(p) in live for p in node.parents):
                    continue
                for parent, pg in zip(node.parents, node.backward(g)):
                    if pg is None or id(parent) not in live:
                        continue
                    pkey = id(parent)
                    grads[pkey] = pg if pkey not in grads else add(grads[pkey], pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else constant(np.zeros(w.shape)))
    return out


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("finite_diff: step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def leaves_like(arrays: Iterable[np.ndarray]) -> list:
    return [variable(a) for a in arrays]
