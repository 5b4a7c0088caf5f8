"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records every operation applied to its nodes. Values are
computed eagerly while the graph is built; :func:`forward` can replay the
recorded operations with different input bindings, and :meth:`Graph.backward`
runs the reverse sweep from a scalar loss.

The op set is deliberately small. Everything else (group norm, correlation
statistics, softmax cross-entropy) is composed from these primitives::

    add sub mul div matmul transpose broadcast_to sum mean square sqrt
    scale shift relu exp log concat stop_gradient straight_through

``straight_through(live, target)`` is the fused form of
``live + stop_gradient(target - live)``: its value is exactly ``target`` and
its gradient flows to ``live`` unchanged. The unfused expression can be off
by an ulp in the forward value, which matters when callers rely on the
combined value equalling ``target`` bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonScalarLoss, NumericError, ShapeMismatch, UnboundInput

DTYPE = np.float64


def as_tensor(value) -> np.ndarray:
    if isinstance(value, np.ndarray) and value.dtype == DTYPE and not value.flags.writeable:
        return value
    arr = np.array(value, dtype=DTYPE)
    arr.flags.writeable = False
    return arr


def _check_finite(value: np.ndarray, what: str) -> None:
    # A finite sum rules out NaN and Inf; only otherwise is the elementwise
    # check needed (an infinite sum may be plain overflow).
    if not np.isfinite(np.add.reduce(value, axis=None)) and not np.isfinite(value).all():
        kind = "NaN" if np.isnan(value).any() else "Inf"
        raise NumericError(f"{kind} produced by {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


# Each entry: (forward(*values, **attrs), vjp(grad, out, values, attrs)).
# vjp returns one gradient (or None) per parent.
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name, fwd, vjp):
    _OPS[name] = (fwd, vjp)


def _binary_fwd(fn):
    def fwd(a, b):
        try:
            return fn(a, b)
        except ValueError as exc:
            raise ShapeMismatch(f"{a.shape} vs {b.shape}: {exc}") from None

    return fwd


_register(
    "add",
    _binary_fwd(np.add),
    lambda g, out, v, at: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
)
_register(
    "sub",
    _binary_fwd(np.subtract),
    lambda g, out, v, at: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
)
_register(
    "mul",
    _binary_fwd(np.multiply),
    lambda g, out, v, at: (
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ),
)
_register(
    "div",
    _binary_fwd(np.divide),
    lambda g, out, v, at: (
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ),
)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return a @ b


_register("matmul", _matmul_fwd, lambda g, out, v, at: (g @ v[1].T, v[0].T @ g))
_register("transpose", lambda x: x.T, lambda g, out, v, at: (g.T,))


def _broadcast_fwd(x, shape):
    try:
        return np.broadcast_to(x, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {x.shape} to {shape}") from None


_register(
    "broadcast_to",
    _broadcast_fwd,
    lambda g, out, v, at: (_unbroadcast(g, v[0].shape),),
)
_register(
    "sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, out, v, at: (
        _expand_reduced(g, v[0].shape, at.get("axis"), at.get("keepdims", False)),
    ),
)
_register(
    "mean",
    lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims),
    lambda g, out, v, at: (
        _expand_reduced(g, v[0].shape, at.get("axis"), at.get("keepdims", False))
        / _reduced_count(v[0].shape, at.get("axis")),
    ),
)
_register("square", lambda x: x * x, lambda g, out, v, at: (2.0 * v[0] * g,))
_register("sqrt", np.sqrt, lambda g, out, v, at: (g / (2.0 * out),))
_register("scale", lambda x, c: x * c, lambda g, out, v, at: (g * at["c"],))
_register("shift", lambda x, c: x + c, lambda g, out, v, at: (g,))
_register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, v, at: (g * (v[0] > 0),))
_register("exp", np.exp, lambda g, out, v, at: (g * out,))
_register("log", np.log, lambda g, out, v, at: (g / v[0],))


def _concat_fwd(*xs, axis=0):
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _concat_vjp(g, out, v, at):
    axis = at.get("axis", 0)
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_register("concat", _concat_fwd, _concat_vjp)
_register("stop_gradient", lambda x: x, lambda g, out, v, at: (None,))


def _straight_through_fwd(live, target):
    if live.shape != target.shape:
        raise ShapeMismatch(f"straight_through {live.shape} vs {target.shape}")
    return target


_register("straight_through", _straight_through_fwd, lambda g, out, v, at: (g, None))


class Node:
    """A value in a :class:`Graph`. Supports ``+ - * / @`` and ``.T``."""

    __slots__ = ("graph", "id", "op", "parents", "attrs", "value", "name", "requires_grad")

    def __init__(self, graph, id, op, parents, attrs, value, name, requires_grad):
        self.graph = graph
        self.id = id
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        shape = None if self.value is None else self.value.shape
        return f"Node({self.id}, {self.op}{label}, shape={shape})"

    def _lift(self, other) -> Node:
        if isinstance(other, Node):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, other)
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -other)
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        if np.isscalar(other):
            return shift(scale(self, -1.0), other)
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    @property
    def T(self):
        return transpose(self)


class GradientMap(Mapping):
    """Gradients keyed by node id. Nodes the loss does not reach map to zeros."""

    def __init__(self, graph: Graph, grads: list):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        idx = key.id if isinstance(key, Node) else key
        if not 0 <= idx < len(self._graph.nodes):
            raise KeyError(key)
        grad = self._grads[idx] if idx < len(self._grads) else None
        if grad is None:
            return np.zeros_like(self._graph.nodes[idx].value)
        return grad

    def __iter__(self):
        return iter(range(len(self._graph.nodes)))

    def __len__(self):
        return len(self._graph.nodes)


class Graph:
    """Records nodes in creation order, which is also a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}

    def _leaf(self, kind, value, name, requires_grad):
        if value is not None:
            value = as_tensor(value)
            _check_finite(value, f"{kind} {name or ''}".strip())
        node = Node(self, len(self.nodes), kind, (), {}, value, name, requires_grad)
        self.nodes.append(node)
        return node

    def input(self, name: str, value=None) -> Node:
        """Placeholder that :func:`forward` may rebind by name."""
        node = self._leaf("input", value, name, True)
        self.inputs[name] = node
        return node

    def param(self, name: str, value) -> Node:
        node = self._leaf("param", value, name, True)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._leaf("const", value, None, False)

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def apply(self, op: str, parents: Sequence[Node], **attrs) -> Node:
        fwd, _ = _OPS[op]
        for p in parents:
            if p.graph is not self:
                raise ValueError("cannot mix nodes from different graphs")
        values = [p.value for p in parents]
        if any(v is None for v in values):
            value = None
        else:
            value = fwd(*values, **attrs)
            _check_finite(value, op)
        requires_grad = op != "stop_gradient" and any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, tuple(parents), attrs, value, None, requires_grad)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> GradientMap:
        """Reverse sweep from ``loss`` seeded with 1.0."""
        if loss.value is None:
            raise UnboundInput("graph has unbound inputs; bind them before backward")
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.value.shape}")
        grads: list = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or not node.parents:
                continue
            _, vjp = _OPS[node.op]
            parent_grads = vjp(g, node.value, [p.value for p in node.parents], node.attrs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.op}")
                prev = grads[parent.id]
                grads[parent.id] = pg if prev is None else prev + pg
        return GradientMap(self, grads)


def _values_for(graph: Graph, inputs: Mapping[str, object], overrides=None) -> list:
    overrides = overrides or {}
    values: list = []
    for node in graph.nodes:
        if node.id in overrides:
            values.append(overrides[node.id])
        elif node.op == "input":
            if node.name in inputs:
                values.append(as_tensor(inputs[node.name]))
            elif node.value is not None:
                values.append(node.value)
            else:
                raise UnboundInput(f"input {node.name!r} is not bound")
        elif not node.parents:
            values.append(node.value)
        else:
            fwd, _ = _OPS[node.op]
            value = fwd(*(values[p.id] for p in node.parents), **node.attrs)
            _check_finite(value, node.op)
            values.append(value)
    return values


def forward(graph: Graph, inputs: Mapping[str, object] | None = None) -> dict[str, np.ndarray]:
    """Replay ``graph`` with new input bindings and return its named outputs.

    Unknown input names raise :class:`UnboundInput`; placeholders not named
    in ``inputs`` keep the value they were built with.
    """
    inputs = dict(inputs or {})
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise UnboundInput(f"graph has no inputs named {sorted(unknown)}")
    values = _values_for(graph, inputs)
    return {name: values[node.id] for name, node in graph.outputs.items()}


# Functional op wrappers. The graph is taken from the first node argument.


def add(a: Node, b: Node) -> Node:
    return a.graph.apply("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return a.graph.apply("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return a.graph.apply("mul", (a, b))


def div(a: Node, b: Node) -> Node:
    return a.graph.apply("div", (a, b))


def matmul(a: Node, b: Node) -> Node:
    return a.graph.apply("matmul", (a, b))


def transpose(x: Node) -> Node:
    return x.graph.apply("transpose", (x,))


def broadcast_to(x: Node, shape) -> Node:
    return x.graph.apply("broadcast_to", (x,), shape=tuple(shape))


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    return x.graph.apply("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    return x.graph.apply("mean", (x,), axis=axis, keepdims=keepdims)


def square(x: Node) -> Node:
    return x.graph.apply("square", (x,))


def sqrt(x: Node) -> Node:
    return x.graph.apply("sqrt", (x,))


def scale(x: Node, c: float) -> Node:
    return x.graph.apply("scale", (x,), c=float(c))


def shift(x: Node, c: float) -> Node:
    return x.graph.apply("shift", (x,), c=float(c))


def relu(x: Node) -> Node:
    return x.graph.apply("relu", (x,))


def exp(x: Node) -> Node:
    return x.graph.apply("exp", (x,))


def log(x: Node) -> Node:
    return x.graph.apply("log", (x,))


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    return xs[0].graph.apply("concat", tuple(xs), axis=axis)


def stop_gradient(x: Node) -> Node:
    return x.graph.apply("stop_gradient", (x,))


def straight_through(live: Node, target: Node) -> Node:
    return live.graph.apply("straight_through", (live, target))


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps near-zero gradients from dominating with pure roundoff.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    graph: Graph,
    loss: Node,
    param: Node,
    step: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-6,
    indices: Iterable[tuple] | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``loss`` wrt ``param`` with central differences.

    The graph is replayed for every perturbed entry, so keep ``param`` small
    or pass ``indices`` to check a subset.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = graph.backward(loss)[param]
    base = param.value
    if indices is None:
        indices = list(np.ndindex(base.shape))
    else:
        indices = list(indices)
    numeric = np.zeros(len(indices))
    picked = np.zeros(len(indices))
    for k, idx in enumerate(indices):
        vals = []
        for sign in (1.0, -1.0):
            bumped = np.array(base, copy=True)
            bumped[idx] += sign * step
            vals.append(float(_values_for(graph, {}, {param.id: bumped})[loss.id].reshape(())))
        numeric[k] = (vals[0] - vals[1]) / (2.0 * step)
        picked[k] = analytic[idx]
    if not indices:
        return GradCheckReport(0.0, 0.0, 0, tol)
    rel = relative_error(picked, numeric, floor)
    return GradCheckReport(
        float(rel.max()), float(np.abs(picked - numeric).max()), len(indices), tol
    )
