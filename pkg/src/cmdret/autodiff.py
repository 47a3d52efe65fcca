"""Small define-by-run reverse-mode autodiff over numpy arrays.

Only the operators the retrieval model needs are provided. Every op returns a
new :class:`Node`; calling :func:`backward` on a scalar node fills ``.grad`` on
every node reachable from it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "op", "parents", "_backward")

    def __init__(self, value, op: str = "leaf", parents: tuple = (), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar; keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Node":
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(name: str, fn, x, y):
    x, y = as_node(x), as_node(y)
    try:
        return x, y, fn(x.value, y.value)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes lhs={x.shape} rhs={y.shape}") from None


def add(x, y) -> Node:
    x, y, out = _binary("add", np.add, x, y)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return Node(out, "add", (x, y), bw)


def sub(x, y) -> Node:
    x, y, out = _binary("sub", np.subtract, x, y)

    def bw(g):
        return _unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)

    return Node(out, "sub", (x, y), bw)


def elementwise_mul(x, y) -> Node:
    x, y, out = _binary("elementwise_mul", np.multiply, x, y)

    def bw(g):
        return _unbroadcast(g * y.value, x.shape), _unbroadcast(g * x.value, y.shape)

    return Node(out, "mul", (x, y), bw)


def scale(x, c: float) -> Node:
    x = as_node(x)
    return Node(x.value * c, "scale", (x,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    """2-D matrix product (vectors are treated as rows/columns as numpy does)."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: lhs={a.shape} rhs={b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv) if av.ndim == 2 else g * bv
        if av.ndim == 1:
            gb = np.outer(av, g) if bv.ndim == 2 else g * av
        else:
            gb = av.T @ g
        return ga, gb

    return Node(av @ bv, "matmul", (a, b), bw)


def affine(x, W, b) -> Node:
    """``x @ W + b`` for a vector or a batch of row vectors."""
    x, W, b = as_node(x), as_node(W), as_node(b)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x={x.shape} W={W.shape} b={b.shape}")
    return add(matmul(x, W), b)


def sigmoid(x) -> Node:
    x = as_node(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return Node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def hinge(x) -> Node:
    """``max(0, x)``; the subgradient at 0 is taken as 0."""
    x = as_node(x)
    active = x.value > 0
    return Node(np.where(active, x.value, 0.0), "hinge", (x,), lambda g: (g * active,))


def softmax(x, mask=None) -> Node:
    """Softmax along the last axis.

    ``mask`` (boolean, broadcastable against ``x``) removes entries: they get
    weight exactly 0 and pass back exactly 0 gradient. Every slice must keep
    at least one entry.
    """
    x = as_node(x)
    if mask is None:
        shape = x.shape
        keep = np.ones(shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        try:
            shape = np.broadcast_shapes(x.shape, keep.shape)
        except ValueError:
            raise ShapeError(f"softmax: x={x.shape} mask={keep.shape}") from None
        keep = np.broadcast_to(keep, shape)
        if not keep.any(axis=-1).all():
            raise ValueError("softmax: a slice has every entry masked")
    z = np.where(keep, np.broadcast_to(x.value, shape), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = out * (g - (g * out).sum(axis=-1, keepdims=True))
        return (_unbroadcast(gx, x.shape),)

    return Node(out, "softmax", (x,), bw)


def l2_normalize(x) -> Node:
    """Normalize along the last axis. Zero rows map to zero with zero gradient."""
    x = as_node(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, x.value / safe, 0.0)

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - out * proj) / safe, 0.0),)

    return Node(out, "l2_normalize", (x,), bw)


def mean_rows(X) -> Node:
    X = as_node(X)
    if X.value.ndim < 1 or X.shape[0] == 0:
        raise ShapeError(f"mean_rows: empty input of shape {X.shape}")
    n = X.shape[0]
    return Node(X.value.mean(axis=0), "mean_rows", (X,),
                lambda g: (np.broadcast_to(g / n, X.shape).copy(),))


def sum(x, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    out = x.value.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Node(out, "sum", (x,), bw)


def mean(x) -> Node:
    x = as_node(x)
    return scale(sum(x), 1.0 / x.value.size)


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(out, "concat", tuple(xs), bw)


def stack(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def reshape(x, shape) -> Node:
    x = as_node(x)
    return Node(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Node:
    x = as_node(x)
    inv = None if axes is None else np.argsort(axes)
    return Node(np.transpose(x.value, axes), "transpose", (x,),
                lambda g: (np.transpose(g, inv),))


def take(x, indices, axis: int = 0) -> Node:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.value, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.value)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return Node(out, "take", (x,), bw)


def diagonal(x) -> Node:
    x = as_node(x)
    if x.value.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: expected square matrix, got {x.shape}")

    def bw(g):
        return (np.diag(g),)

    return Node(np.diag(x.value).copy(), "diagonal", (x,), bw)


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Fill ``.grad`` of every non-constant node that ``loss`` depends on."""
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if parent.op == "const":
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g


class ParamStore:
    """Named parameters plus Adam moment buffers.

    Values live as numpy arrays; :meth:`nodes` wraps them as fresh leaf nodes
    for one graph, and :meth:`collect_grads` pulls gradients back out.
    """

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._leaves: dict[str, Node] = {}

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def nodes(self) -> dict[str, Node]:
        self._leaves = {k: Node(v, op="param") for k, v in self.values.items()}
        return self._leaves

    def collect_grads(self) -> dict[str, np.ndarray]:
        self.grads = {
            k: (n.grad.copy() if n.grad is not None else np.zeros_like(n.value))
            for k, n in self._leaves.items()
        }
        return self.grads

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k in self.values:
            out.values[k] = self.values[k].copy()
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    def n_params(self) -> int:
        return int(np.sum([v.size for v in self.values.values()]))


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    store: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of one parameter tensor is ``|analytic - numeric| / max(1e-8,
    |numeric|)`` with ``|.|`` the Frobenius norm over that tensor's entries;
    the return value is the max over tensors.
    """
    loss = f(store.nodes())
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("grad_check: non-finite loss")
    backward(loss)
    analytic = store.collect_grads()
    worst = 0.0
    for name in names if names is not None else store.names():
        value = store.values[name]
        numeric = np.zeros_like(value)
        flat, nflat = value.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f(store.nodes()).value
            flat[j] = orig - eps
            down = f(store.nodes()).value
            flat[j] = orig
            nflat[j] = float(up - down) / (2 * eps)
        err = np.linalg.norm(analytic[name] - numeric) / max(1e-8, np.linalg.norm(numeric))
        worst = max(worst, float(err))
    return worst
