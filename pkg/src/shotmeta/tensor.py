"""Dense float64 tensors with reverse-mode autodiff.

Every backward rule is written in terms of :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is itself part of the graph and
can be differentiated again (Hessian-vector products, second-order MAML).

Broadcasting is deliberately narrow: elementwise operations accept two
tensors of identical shape, or a 0-d scalar against any tensor. Anything
else must go through :func:`broadcast_to`, whose gradient is an explicit
sum-reduction.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager
from typing import Union

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
VJP = Callable[["Tensor"], "Tensor"]

_local = threading.local()
_graph_ids = itertools.count(1)
DEFAULT_GRAPH = 0


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _graph_stack() -> list[int]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def current_graph_id() -> int:
    stack = _graph_stack()
    return stack[-1] if stack else DEFAULT_GRAPH


class Graph:
    """Scope that owns every tensor created inside it.

    Tensors from two different graphs cannot be combined while tracking
    gradients, and ``grad`` refuses to differentiate with respect to a node of
    a foreign graph. Graphs are per-thread, so independent inner loops can be
    built concurrently.
    """

    def __init__(self) -> None:
        self.id = next(_graph_ids)

    def __enter__(self) -> "Graph":
        _graph_stack().append(self.id)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def enable_grad():
    prev = _grad_enabled()
    _local.grad_enabled = True
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Args:
        data: Anything ``np.asarray`` accepts. The values are copied.
        requires_grad: Mark the tensor as a differentiable leaf.
        name: Optional label, used in error messages.
    """

    __slots__ = ("data", "requires_grad", "_parents", "graph_id", "name")
    __array_priority__ = 1000.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if requires_grad and not np.isfinite(arr).all():
            raise NonFiniteError("Tensor", "leaf contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[tuple[Tensor, VJP], ...] = ()
        self.graph_id = current_graph_id()
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._parents = ()
        t.graph_id = current_graph_id()
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="expected a single element")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # Identity semantics: tensors are graph nodes and used as dict keys.
    __hash__ = object.__hash__

    # -- operators -----------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _node(op: str, out: np.ndarray, parents: Iterable[tuple[Tensor, VJP]]) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op)
    t = Tensor._wrap(out)
    if not _grad_enabled():
        return t
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    if not live:
        return t
    gid = live[0][0].graph_id
    for p, _ in live[1:]:
        if p.graph_id != gid:
            raise GraphError(f"{op}: operands belong to different graphs ({gid} vs {p.graph_id})")
    t.requires_grad = True
    t._parents = live
    t.graph_id = gid
    return t


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(op, a.shape, b.shape, detail="only same-shape or scalar broadcasting")


def _unbroadcast_scalar(g: Tensor, target: Tensor) -> Tensor:
    # gradient flowing into a 0-d operand that was broadcast against a tensor
    if target.ndim == 0 and g.ndim != 0:
        return tsum(g)
    return g


# -- elementwise arithmetic -------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("add", a, b)
    return _node(
        "add",
        a.data + b.data,
        ((a, lambda g: _unbroadcast_scalar(g, a)), (b, lambda g: _unbroadcast_scalar(g, b))),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("sub", a, b)
    return _node(
        "sub",
        a.data - b.data,
        ((a, lambda g: _unbroadcast_scalar(g, a)), (b, lambda g: _unbroadcast_scalar(neg(g), b))),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, ((a, neg),))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("mul", a, b)
    return _node(
        "mul",
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast_scalar(mul(g, b), a)),
            (b, lambda g: _unbroadcast_scalar(mul(g, a), b)),
        ),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(
        "div",
        out,
        (
            (a, lambda g: _unbroadcast_scalar(div(g, b), a)),
            (b, lambda g: _unbroadcast_scalar(neg(div(mul(g, a), mul(b, b))), b)),
        ),
    )


def scale(a: ArrayLike, c: float) -> Tensor:
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, ((a, lambda g: scale(g, c)),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _node("relu", a.data * mask, ((a, lambda g: mul(g, Tensor._wrap(mask))),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    out_holder: list[Tensor] = []
    out = _node("exp", out_data, ((a, lambda g: mul(g, out_holder[0])),))
    out_holder.append(out)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, ((a, lambda g: div(g, a)),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


# -- reductions and shape ops ------------------------------------------------
def _norm_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError("sum", (ndim,), detail=f"axis {axis} out of range")
    return axis % ndim


def tsum(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=ax, keepdims=keepdims)
    in_shape = a.shape
    if ax is None:
        kept = (1,) * a.ndim
    else:
        kept = tuple(1 if i == ax else n for i, n in enumerate(in_shape))

    def vjp(g: Tensor) -> Tensor:
        return broadcast_to(reshape(g, kept), in_shape)

    return _node("sum", np.asarray(out, dtype=np.float64), ((a, vjp),))


def mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else a.shape[ax]
    if count == 0:
        raise ShapeError("mean", a.shape, detail="mean over an empty extent")
    return scale(tsum(a, axis=ax, keepdims=keepdims), 1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    in_shape = a.shape
    return _node("reshape", out, ((a, lambda g: reshape(g, in_shape)),))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a 2-d tensor")
    return _node("transpose", a.data.T, ((a, transpose),))


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    lead = g.ndim - len(shape)
    out = g
    for _ in range(lead):
        out = tsum(out, axis=0)
    for i, n in enumerate(shape):
        if n == 1 and out.shape[i] != 1:
            out = tsum(out, axis=i, keepdims=True)
    return out


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums the copies back."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    in_shape = a.shape
    return _node("broadcast_to", out, ((a, lambda g: _sum_to(g, in_shape)),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(
        "matmul",
        a.data @ b.data,
        ((a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))),
    )


def dot(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Full contraction ``sum(a * b)`` of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return tsum(mul(a, b))


# -- differentiation ---------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order of the requires-grad subgraph below ``root`` (explicit stack)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_root(root: Tensor) -> None:
    if not isinstance(root, Tensor):
        raise GraphError("root must be a Tensor")
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not require grad")


def _backprop(root: Tensor, keep: set[int] | None, create_graph: bool) -> dict[int, Tensor]:
    order = _topo_order(root)
    grads: dict[int, Tensor] = {id(root): Tensor._wrap(np.ones_like(root.data))}
    result: dict[int, Tensor] = {}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if (keep is None and node.is_leaf) or (keep is not None and id(node) in keep):
                result[id(node)] = g
            for parent, vjp in node._parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    return result


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Nodes that ``root`` does not depend on get an all-zero gradient. With
    ``create_graph`` the returned tensors carry their own graph and can be
    differentiated again.
    """
    _check_root(root)
    for w in wrt:
        if not isinstance(w, Tensor):
            raise GraphError("wrt entries must be Tensors")
        if w.requires_grad and w.graph_id != root.graph_id:
            raise GraphError(
                f"cannot differentiate w.r.t. a node of graph {w.graph_id} "
                f"from a root in graph {root.graph_id}"
            )
    found = _backprop(root, {id(w) for w in wrt}, create_graph)
    out = []
    for w in wrt:
        g = found.get(id(w))
        out.append(g if g is not None else Tensor._wrap(np.zeros_like(w.data)))
    return out


def backward(root: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``root`` for every requires-grad leaf it depends on."""
    _check_root(root)
    order = _topo_order(root)
    leaves = {id(n): n for n in order if n.is_leaf}
    found = _backprop(root, None, create_graph)
    return {leaves[k]: v for k, v in found.items()}
