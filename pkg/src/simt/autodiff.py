"""Reverse-mode automatic differentiation on an append-only tape.

Values are float64 numpy arrays computed eagerly when a node is built.
Gradient computations can themselves be recorded on the tape
(``create_graph=True``), which is what makes second-order MAML exact.

Implicit broadcasting in elementwise ops is limited to prepending leading
dimensions (``(n, k, d) + (d,)`` is fine, ``(n, 1, d) + (n, k, d)`` is not).
Anything else must go through an explicit :func:`broadcast_to`.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


class Node:
    __slots__ = ("id", "op", "parents", "value", "attrs", "graph")

    def __init__(self, graph: "Graph", op: str, parents: tuple, value: np.ndarray, attrs):
        self.graph = graph
        self.op = op
        self.parents = parents
        self.value = value
        self.attrs = attrs
        self.id = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def parent_ids(self) -> list[int]:
        return [p.id for p in self.parents]

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only tape of :class:`Node` objects.

    One graph per training step; drop the whole object when done.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.requires_grad: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, value) -> Node:
        node = _leaf(self, value)
        self.requires_grad.add(node.id)
        return node

    def constant(self, value) -> Node:
        return _leaf(self, value)

    def ancestors(self, output: Node) -> set[int]:
        """Ids of every node ``output`` depends on, itself included."""
        seen = {output.id}
        stack = [output]
        while stack:
            n = stack.pop()
            for p in n.parents:
                if p.id not in seen:
                    seen.add(p.id)
                    stack.append(p)
        return seen

    def depends_on(self, output: Node, node: Node) -> bool:
        return node.id in self.ancestors(output)


def _leaf(graph: Graph, value) -> Node:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError("leaf", arr.shape, detail=f"rank > {MAX_RANK}")
    if arr.size == 0:
        raise ShapeError("leaf", arr.shape, detail="empty tensor")
    return Node(graph, "leaf", (), arr, None)


def _new(graph: Graph, op: str, parents: tuple, value: np.ndarray, attrs=None) -> Node:
    if type(value) is not np.ndarray:
        value = np.asarray(value, dtype=np.float64)
    if value.ndim > MAX_RANK:
        raise ShapeError(op, value.shape, detail=f"rank > {MAX_RANK}")
    return Node(graph, op, parents, value, attrs)


def _as_node(x, graph: Graph) -> Node:
    if isinstance(x, Node):
        return x
    return graph.constant(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def _lead_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    la, lb = len(sa), len(sb)
    if la > lb and sa[la - lb:] == sb:
        return
    if lb > la and sb[lb - la:] == sa:
        return
    raise ShapeError(op, sa, sb, detail="only leading-dimension broadcast is supported")


# ---------------------------------------------------------------------------
# array-level helpers shared by forward ops and the numpy gradient backend


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if b == 1 and a != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _norm_axis(axis: int, ndim: int, op: str, shape) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, shape, detail=f"axis {axis} out of range")
    return axis % ndim


def _keep_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return tuple(1 for _ in shape)
    return tuple(1 if i == axis else d for i, d in enumerate(shape))


# ---------------------------------------------------------------------------
# public ops


def add(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _as_node(a, g), _as_node(b, g)
    _lead_broadcast("add", a.shape, b.shape)
    return _new(g, "add", (a, b), a.value + b.value)


def sub(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _as_node(a, g), _as_node(b, g)
    _lead_broadcast("subtract", a.shape, b.shape)
    return _new(g, "sub", (a, b), a.value - b.value)


def mul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _as_node(a, g), _as_node(b, g)
    _lead_broadcast("multiply", a.shape, b.shape)
    return _new(g, "mul", (a, b), a.value * b.value)


def matmul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _as_node(a, g), _as_node(b, g)
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    _lead_broadcast("matmul", sa[:-2], sb[:-2])
    return _new(g, "matmul", (a, b), a.value @ b.value)


def neg(x: Node) -> Node:
    return _new(x.graph, "neg", (x,), -x.value)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _new(x.graph, "scale", (x,), x.value * c, c)


def relu(x: Node) -> Node:
    return _new(x.graph, "relu", (x,), np.maximum(x.value, 0.0))


def tanh(x: Node) -> Node:
    return _new(x.graph, "tanh", (x,), np.tanh(x.value))


def exp(x: Node) -> Node:
    return _new(x.graph, "exp", (x,), np.exp(x.value))


def log(x: Node) -> Node:
    return _new(x.graph, "log", (x,), np.log(x.value))


def reciprocal(x: Node) -> Node:
    return _new(x.graph, "reciprocal", (x,), 1.0 / x.value)


def sin(x: Node) -> Node:
    return _new(x.graph, "sin", (x,), np.sin(x.value))


def cos(x: Node) -> Node:
    return _new(x.graph, "cos", (x,), np.cos(x.value))


def square(x: Node) -> Node:
    return _new(x.graph, "square", (x,), x.value * x.value)


def sum(x: Node, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    if axis is not None:
        axis = _norm_axis(axis, x.value.ndim, "sum", x.shape)
    return _new(x.graph, "sum", (x,), x.value.sum(axis=axis, keepdims=keepdims), (axis, keepdims))


def mean(x: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    if axis is not None:
        axis = _norm_axis(axis, x.value.ndim, "mean", x.shape)
    return _new(x.graph, "mean", (x,), x.value.mean(axis=axis, keepdims=keepdims), (axis, keepdims))


def max(x: Node, axis: int = -1, keepdims: bool = False) -> Node:  # noqa: A001
    axis = _norm_axis(axis, x.value.ndim, "max", x.shape)
    return _new(x.graph, "max", (x,), x.value.max(axis=axis, keepdims=keepdims), (axis, keepdims))


def softmax(x: Node) -> Node:
    return _new(x.graph, "softmax", (x,), _softmax(x.value))


def log_softmax(x: Node) -> Node:
    return _new(x.graph, "log_softmax", (x,), _log_softmax(x.value))


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concatenate", detail="no operands")
    g = xs[0].graph
    ndim = xs[0].value.ndim
    axis = _norm_axis(axis, ndim, "concatenate", xs[0].shape)
    ref = xs[0].shape
    for x in xs[1:]:
        s = x.shape
        if len(s) != ndim or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError("concatenate", *(x.shape for x in xs))
    sizes = tuple(x.shape[axis] for x in xs)
    return _new(g, "concat", xs, np.concatenate([x.value for x in xs], axis=axis), (axis, sizes))


def slice(x: Node, axis: int, start: int, stop: int) -> Node:  # noqa: A001
    axis = _norm_axis(axis, x.value.ndim, "slice", x.shape)
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", x.shape, detail=f"[{start}:{stop}] on axis {axis}")
    idx = (np.s_[:],) * axis + (np.s_[start:stop],)
    return _new(x.graph, "slice", (x,), x.value[idx], (axis, start, stop, n))


def pad_slice(x: Node, axis: int, start: int, length: int) -> Node:
    """Embed ``x`` into zeros of extent ``length`` along ``axis`` (adjoint of slice)."""
    shape = list(x.shape)
    shape[axis] = length
    out = np.zeros(shape)
    idx = (np.s_[:],) * axis + (np.s_[start:start + x.shape[axis]],)
    out[idx] = x.value
    return _new(x.graph, "pad_slice", (x,), out, (axis, start, length))


def mask_mul(x: Node, mask) -> Node:
    mask = np.asarray(mask, dtype=np.float64)
    _lead_broadcast("mask_multiply", x.shape, mask.shape)
    return _new(x.graph, "mask_mul", (x,), x.value * mask, mask)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    try:
        v = x.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _new(x.graph, "reshape", (x,), v, x.shape)


def transpose(x: Node) -> Node:
    """Swap the last two axes."""
    if x.value.ndim < 2:
        raise ShapeError("transpose", x.shape)
    return _new(x.graph, "transpose", (x,), np.swapaxes(x.value, -1, -2))


def broadcast_to(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    try:
        v = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return _new(x.graph, "broadcast_to", (x,), v, x.shape)


def sum_to(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    return _new(x.graph, "sum_to", (x,), _sum_to(x.value, shape), x.shape)


def tile_leading(x: Node, n: int) -> Node:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    return broadcast_to(x, (n,) + x.shape)


def detach(x: Node) -> Node:
    return x.graph.constant(x.value)


_BUILDERS: dict[str, Callable] = {
    "add": add, "subtract": sub, "sub": sub, "multiply": mul, "mul": mul,
    "matmul": matmul, "matrix-multiply": matmul, "negate": neg, "neg": neg,
    "scale": scale, "scale-by-constant": scale, "relu": relu, "tanh": tanh,
    "exp": exp, "log": log, "reciprocal": reciprocal, "sin": sin, "cos": cos,
    "square": square, "sum": sum, "mean": mean, "max": max,
    "softmax": softmax, "log_softmax": log_softmax, "concat": concat,
    "concatenate": concat, "slice": slice, "pad_slice": pad_slice,
    "mask_mul": mask_mul, "elementwise-mask-multiply": mask_mul,
    "reshape": reshape, "transpose": transpose, "broadcast_to": broadcast_to,
    "sum_to": sum_to,
}


def build(op: str, parents: Sequence[Node], graph: Graph | None = None, **attrs) -> Node:
    """Generic entry point: ``build("matmul", [a, b])``."""
    try:
        fn = _BUILDERS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    if graph is not None and any(p.graph is not graph for p in parents):
        raise ValueError(f"{op}: parent belongs to a different graph")
    if op in ("concat", "concatenate"):
        return fn(parents, **attrs)
    return fn(*parents, **attrs)


# ---------------------------------------------------------------------------
# gradient backends: the same vector-Jacobian rules run on raw arrays (fast,
# constant gradients) or on nodes (recorded, differentiable gradients)


class _ArrayOps:
    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    matmul = staticmethod(np.matmul)
    neg = staticmethod(np.negative)
    exp = staticmethod(np.exp)
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    sum_to = staticmethod(_sum_to)
    softmax = staticmethod(_softmax)

    @staticmethod
    def value(x):
        return x

    @staticmethod
    def const(v):
        return v

    @staticmethod
    def scale(x, c):
        return x * c

    @staticmethod
    def square(x):
        return x * x

    @staticmethod
    def mask_mul(x, m):
        return x * m

    @staticmethod
    def transpose(x):
        return np.swapaxes(x, -1, -2)

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def broadcast_to(x, shape):
        return np.broadcast_to(x, shape)

    @staticmethod
    def sum(x, axis, keepdims):
        return x.sum(axis=axis, keepdims=keepdims)

    @staticmethod
    def slice(x, axis, start, stop):
        return x[(np.s_[:],) * axis + (np.s_[start:stop],)]

    @staticmethod
    def pad_slice(x, axis, start, length):
        shape = list(x.shape)
        shape[axis] = length
        out = np.zeros(shape)
        out[(np.s_[:],) * axis + (np.s_[start:start + x.shape[axis]],)] = x
        return out


class _NodeOps:
    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    matmul = staticmethod(matmul)
    neg = staticmethod(neg)
    exp = staticmethod(exp)
    sin = staticmethod(sin)
    cos = staticmethod(cos)
    sum_to = staticmethod(sum_to)
    softmax = staticmethod(softmax)
    scale = staticmethod(scale)
    square = staticmethod(square)
    mask_mul = staticmethod(mask_mul)
    transpose = staticmethod(transpose)
    reshape = staticmethod(reshape)
    broadcast_to = staticmethod(broadcast_to)
    slice = staticmethod(slice)
    pad_slice = staticmethod(pad_slice)

    def __init__(self, graph: Graph):
        self.graph = graph

    @staticmethod
    def value(x):
        return x.value

    def const(self, v):
        return self.graph.constant(v)

    @staticmethod
    def sum(x, axis, keepdims):
        return sum(x, axis=axis, keepdims=keepdims)


def _shape(F, x):
    return F.value(x).shape


def _vjp_add(F, node, ins, out, g, needs):
    return [F.sum_to(g, node.parents[0].shape) if needs[0] else None,
            F.sum_to(g, node.parents[1].shape) if needs[1] else None]


def _vjp_sub(F, node, ins, out, g, needs):
    return [F.sum_to(g, node.parents[0].shape) if needs[0] else None,
            F.neg(F.sum_to(g, node.parents[1].shape)) if needs[1] else None]


def _vjp_mul(F, node, ins, out, g, needs):
    a, b = ins
    return [F.sum_to(F.mul(g, b), node.parents[0].shape) if needs[0] else None,
            F.sum_to(F.mul(g, a), node.parents[1].shape) if needs[1] else None]


def _vjp_matmul(F, node, ins, out, g, needs):
    a, b = ins
    sa, sb = node.parents[0].shape, node.parents[1].shape
    ga = gb = None
    if needs[0]:
        if len(sa) == 2 and len(sb) > 2:
            # shared left operand: fold the batch into one matmul
            gt = F.reshape(F.transpose(g), (-1, sa[0]))
            bt = F.reshape(F.transpose(b), (-1, sa[1]))
            ga = F.transpose(F.matmul(F.transpose(bt), gt))
        else:
            ga = F.sum_to(F.matmul(g, F.transpose(b)), sa)
    if needs[1]:
        if len(sb) == 2 and len(sa) > 2:
            a2 = F.reshape(a, (-1, sb[0]))
            g2 = F.reshape(g, (-1, sb[1]))
            gb = F.matmul(F.transpose(a2), g2)
        else:
            gb = F.sum_to(F.matmul(F.transpose(a), g), sb)
    return [ga, gb]


def _vjp_neg(F, node, ins, out, g, needs):
    return [F.neg(g)]


def _vjp_scale(F, node, ins, out, g, needs):
    return [F.scale(g, node.attrs)]


def _vjp_relu(F, node, ins, out, g, needs):
    return [F.mask_mul(g, (node.parents[0].value > 0).astype(np.float64))]


def _vjp_tanh(F, node, ins, out, g, needs):
    return [F.sub(g, F.mul(g, F.square(out)))]


def _vjp_exp(F, node, ins, out, g, needs):
    return [F.mul(g, out)]


def _vjp_log(F, node, ins, out, g, needs):
    (x,) = ins
    if F is _ArrayOps:
        return [g / x]
    return [F.mul(g, reciprocal(x))]


def _vjp_reciprocal(F, node, ins, out, g, needs):
    return [F.neg(F.mul(g, F.square(out)))]


def _vjp_sin(F, node, ins, out, g, needs):
    return [F.mul(g, F.cos(ins[0]))]


def _vjp_cos(F, node, ins, out, g, needs):
    return [F.neg(F.mul(g, F.sin(ins[0])))]


def _vjp_square(F, node, ins, out, g, needs):
    return [F.scale(F.mul(g, ins[0]), 2.0)]


def _expand(F, g, in_shape, axis, keepdims):
    if not keepdims:
        g = F.reshape(g, _keep_shape(in_shape, axis))
    return F.broadcast_to(g, in_shape)


def _vjp_sum(F, node, ins, out, g, needs):
    axis, keepdims = node.attrs
    return [_expand(F, g, node.parents[0].shape, axis, keepdims)]


def _vjp_mean(F, node, ins, out, g, needs):
    axis, keepdims = node.attrs
    shape = node.parents[0].shape
    n = int(np.prod(shape)) if axis is None else shape[axis]
    return [F.scale(_expand(F, g, shape, axis, keepdims), 1.0 / n)]


def _vjp_max(F, node, ins, out, g, needs):
    axis, keepdims = node.attrs
    x = node.parents[0].value
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, idx, 1.0, axis=axis)
    return [F.mask_mul(_expand(F, g, x.shape, axis, keepdims), onehot)]


def _vjp_softmax(F, node, ins, out, g, needs):
    shape = node.shape
    s = F.broadcast_to(F.sum(F.mul(g, out), -1, True), shape)
    return [F.mul(out, F.sub(g, s))]


def _vjp_log_softmax(F, node, ins, out, g, needs):
    shape = node.shape
    s = F.broadcast_to(F.sum(g, -1, True), shape)
    return [F.sub(g, F.mul(F.exp(out), s))]


def _vjp_concat(F, node, ins, out, g, needs):
    axis, sizes = node.attrs
    grads, start = [], 0
    for need, n in zip(needs, sizes):
        grads.append(F.slice(g, axis, start, start + n) if need else None)
        start += n
    return grads


def _vjp_slice(F, node, ins, out, g, needs):
    axis, start, stop, n = node.attrs
    return [F.pad_slice(g, axis, start, n)]


def _vjp_pad_slice(F, node, ins, out, g, needs):
    axis, start, length = node.attrs
    return [F.slice(g, axis, start, start + node.parents[0].shape[axis])]


def _vjp_mask_mul(F, node, ins, out, g, needs):
    return [F.mask_mul(g, node.attrs)]


def _vjp_reshape(F, node, ins, out, g, needs):
    return [F.reshape(g, node.attrs)]


def _vjp_transpose(F, node, ins, out, g, needs):
    return [F.transpose(g)]


def _vjp_broadcast_to(F, node, ins, out, g, needs):
    return [F.sum_to(g, node.attrs)]


def _vjp_sum_to(F, node, ins, out, g, needs):
    return [F.broadcast_to(g, node.attrs)]


_VJP = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "matmul": _vjp_matmul,
    "neg": _vjp_neg, "scale": _vjp_scale, "relu": _vjp_relu, "tanh": _vjp_tanh,
    "exp": _vjp_exp, "log": _vjp_log, "reciprocal": _vjp_reciprocal,
    "sin": _vjp_sin, "cos": _vjp_cos, "square": _vjp_square, "sum": _vjp_sum,
    "mean": _vjp_mean, "max": _vjp_max, "softmax": _vjp_softmax,
    "log_softmax": _vjp_log_softmax, "concat": _vjp_concat, "slice": _vjp_slice,
    "pad_slice": _vjp_pad_slice, "mask_mul": _vjp_mask_mul,
    "reshape": _vjp_reshape, "transpose": _vjp_transpose,
    "broadcast_to": _vjp_broadcast_to, "sum_to": _vjp_sum_to,
}


def grad(output: Node, wrt: Sequence[Node], graph: Graph | None = None,
         create_graph: bool = False) -> list[Node]:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned nodes are built from differentiable
    ops on the same tape; otherwise they are constant leaves. A ``wrt`` node
    that ``output`` does not depend on gets an all-zero gradient.
    """
    graph = output.graph if graph is None else graph
    if output.shape != ():
        raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if w.graph is not graph or w.id >= len(graph.nodes) or graph.nodes[w.id] is not w:
            raise GradientError(f"{w!r} is not on this graph")
    if not wrt:
        return []

    lo = min(w.id for w in wrt)
    nodes = graph.nodes
    dep = {w.id for w in wrt}
    for n in nodes[lo:output.id + 1]:
        if n.id in dep:
            continue
        for p in n.parents:
            if p.id in dep:
                dep.add(n.id)
                break

    F = _NodeOps(graph) if create_graph else _ArrayOps
    adj: dict[int, object] = {}
    if output.id in dep:
        adj[output.id] = F.const(np.ones(()))
        for n in reversed(nodes[lo:output.id + 1]):
            g = adj.get(n.id)
            if g is None or not n.parents:
                continue
            needs = [p.id in dep for p in n.parents]
            if not any(needs):
                continue
            if create_graph:
                ins = n.parents
                out = n
            else:
                ins = [p.value for p in n.parents]
                out = n.value
            pg = _VJP[n.op](F, n, ins, out, g, needs)
            for p, need, gp in zip(n.parents, needs, pg):
                if not need or gp is None:
                    continue
                prev = adj.get(p.id)
                adj[p.id] = gp if prev is None else F.add(prev, gp)

    result = []
    for w in wrt:
        g = adj.get(w.id)
        if g is None:
            result.append(graph.constant(np.zeros(w.shape)))
        elif create_graph:
            result.append(g)
        else:
            result.append(graph.constant(np.asarray(g)))
    return result


# ---------------------------------------------------------------------------
# named parameter collections


class ParamSet:
    """Ordered mapping ``name -> float64 array`` holding one model's parameters."""

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in items:
            if name in self._entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(value, dtype=np.float64)
            if arr.ndim > MAX_RANK or arr.size == 0:
                raise ShapeError("ParamSet", arr.shape)
            self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def size(self) -> int:
        return int(np.sum([v.size for v in self._entries.values()]))

    def compatible(self, other: "ParamSet") -> bool:
        return (list(self._entries) == list(other._entries)
                and all(a.shape == b.shape for a, b in zip(self.values(), other.values())))

    def check_compatible(self, other: "ParamSet") -> None:
        if not self.compatible(other):
            raise ShapeError("ParamSet", tuple(self.shapes().items()), tuple(other.shapes().items()),
                             detail="names/shapes differ")

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._entries.items())

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet((k, fn(k, v)) for k, v in self._entries.items())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_flat(self, flat: np.ndarray) -> "ParamSet":
        out, i = [], 0
        for k, v in self._entries.items():
            out.append((k, np.asarray(flat[i:i + v.size], dtype=np.float64).reshape(v.shape)))
            i += v.size
        if i != len(flat):
            raise ShapeError("from_flat", (len(flat),), (i,))
        return ParamSet(out)

    def nodes(self, graph: Graph, requires_grad: bool = True) -> "OrderedDict[str, Node]":
        make = graph.param if requires_grad else graph.constant
        return OrderedDict((k, make(v)) for k, v in self._entries.items())

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of every buffer."""
        return self.compatible(other) and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.values(), other.values()))


def values_of(nodes: Mapping[str, Node]) -> ParamSet:
    return ParamSet((k, n.value) for k, n in nodes.items())


def check_gradient(f: Callable[[Graph, Mapping[str, Node]], Node], at: ParamSet,
                   eps: float = 1e-5) -> float:
    """Max per-coordinate relative error of autodiff vs central differences.

    ``f(graph, nodes)`` must return a scalar node. The relative error of a
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")

    def value_at(ps: ParamSet) -> float:
        g = Graph()
        v = float(f(g, ps.nodes(g)).value)
        if not np.isfinite(v):
            raise GradientError(f"non-finite function value {v}")
        return v

    g = Graph()
    nodes = at.nodes(g)
    out = f(g, nodes)
    if not np.isfinite(out.value):
        raise GradientError(f"non-finite function value {out.value}")
    analytic = np.concatenate([d.value.ravel() for d in grad(out, list(nodes.values()))])

    flat = at.to_flat()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        numeric[i] = (value_at(at.from_flat(xp)) - value_at(at.from_flat(xm))) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
