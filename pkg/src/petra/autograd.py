"""Per-stage reverse-mode differentiation.

A :class:`Graph` records the primitives applied while a stage function runs.
Afterwards :func:`vjp` pulls an output cotangent back to the stage input and
to every parameter leaf. Graphs are local to one stage and are cheap to drop
and re-record, which is all activation recomputation needs.

Stage functions have the signature ``f(graph, x, params) -> y`` where ``x``
and ``y`` are :class:`Var` handles and ``params`` is a list of handles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class UnregisteredPrimitiveError(KeyError):
    pass


@dataclass(frozen=True)
class Primitive:
    """A differentiable op.

    ``forward(*arrays, **attrs)`` returns ``(out, saved)`` where ``out`` is an
    array, or a tuple of arrays when ``n_out > 1``. ``vjp(grads, saved,
    **attrs)`` maps the output cotangent(s) to one cotangent per input (None
    for inputs that receive no gradient).
    """

    name: str
    forward: Callable
    vjp: Callable
    n_out: int = 1


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, n_out: int = 1):
    def deco(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.vjp, n_out)
        return cls
    return deco


class Var:
    __slots__ = ("graph", "id", "value")

    def __init__(self, graph: "Graph", id_: int, value):
        self.graph = graph
        self.id = id_
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass
class Node:
    prim: Primitive
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    saved: tuple
    attrs: dict


@dataclass
class GradPair:
    input_grad: np.ndarray | None
    param_grads: list[np.ndarray] = field(default_factory=list)


class Graph:
    """Recording of one stage evaluation.

    With ``record=False`` primitives run their forward only; this is the
    plain evaluation path and goes through exactly the same kernels.
    ``bn_mode`` is read by batch-norm layers: ``"train"`` (batch statistics,
    running stats untouched), ``"train_update"`` (batch statistics and a
    running-stat update) or ``"eval"``.
    """

    def __init__(self, record: bool = True, bn_mode: str = "train"):
        self.record = record
        self.bn_mode = bn_mode
        self.nodes: list[Node] = []
        self.shapes: dict[int, tuple] = {}
        self._next = 0
        self.input: Var | None = None
        self.params: list[Var] = []
        self.output: Var | None = None

    def _new(self, value) -> Var:
        v = Var(self, self._next, value)
        self._next += 1
        if self.record:
            self.shapes[v.id] = (value.shape, value.dtype)
        return v

    def leaf(self, value) -> Var:
        return self._new(value)

    def apply(self, name: str, *inputs: Var, **attrs):
        try:
            prim = PRIMITIVES[name]
        except KeyError:
            raise UnregisteredPrimitiveError(f"no VJP rule registered for primitive {name!r}") from None
        for v in inputs:
            if v.graph is not self:
                raise ValueError(f"{name}: operand belongs to another graph")
        out, saved = prim.forward(*(v.value for v in inputs), **attrs)
        outs = out if prim.n_out > 1 else (out,)
        vars_ = tuple(self._new(o) for o in outs)
        if self.record:
            self.nodes.append(Node(prim, tuple(v.id for v in inputs), tuple(v.id for v in vars_), saved, attrs))
        return vars_ if prim.n_out > 1 else vars_[0]

    def saved_nbytes(self) -> int:
        """Bytes retained for the backward pass (the stage's full graph)."""
        seen, total = set(), 0
        for node in self.nodes:
            for s in node.saved:
                if isinstance(s, np.ndarray) and id(s) not in seen:
                    seen.add(id(s))
                    total += s.nbytes
        return total

    def backward(self, outputs: Sequence[Var], seeds: Sequence[np.ndarray]) -> dict[int, np.ndarray]:
        if not self.record:
            raise RuntimeError("graph was evaluated without recording")
        grads: dict[int, np.ndarray] = {}
        for v, s in zip(outputs, seeds):
            if s.shape != v.value.shape:
                raise T.ShapeError("vjp", s.shape, v.value.shape)
            grads[v.id] = s
        for node in reversed(self.nodes):
            gs = [grads.get(o) for o in node.outputs]
            if all(g is None for g in gs):
                continue
            if node.prim.n_out > 1:
                gs = tuple(np.zeros(*self.shapes[o]) if g is None else g for o, g in zip(node.outputs, gs))
                in_grads = node.prim.vjp(gs, node.saved, **node.attrs)
            else:
                in_grads = node.prim.vjp(gs[0], node.saved, **node.attrs)
            for i, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                grads[i] = g if i not in grads else grads[i] + g
        return grads


def _leaf_grad(graph: Graph, grads, v: Var):
    g = grads.get(v.id)
    return np.zeros_like(v.value) if g is None else g


def record(f: Callable, x, params: Sequence[np.ndarray], bn_mode: str = "train"):
    """Run ``f`` on ``(x, params)`` while recording; returns ``(y, graph)``."""
    g = Graph(record=True, bn_mode=bn_mode)
    g.input = g.leaf(x)
    g.params = [g.leaf(p) for p in params]
    g.output = f(g, g.input, g.params)
    return g.output.value, g


def evaluate(f: Callable, x, params: Sequence[np.ndarray], bn_mode: str = "train"):
    """Evaluate ``f`` without building a graph."""
    g = Graph(record=False, bn_mode=bn_mode)
    out = f(g, g.leaf(x), [g.leaf(p) for p in params])
    return out.value


def vjp(graph: Graph, delta_out) -> GradPair:
    """Pull ``delta_out`` back through a recorded stage graph."""
    out = graph.output
    delta_out = np.asarray(delta_out, dtype=out.value.dtype).reshape(np.shape(delta_out))
    if delta_out.shape != out.value.shape:
        raise T.ShapeError("vjp", delta_out.shape, out.value.shape)
    grads = graph.backward([out], [delta_out])
    return GradPair(_leaf_grad(graph, grads, graph.input), [_leaf_grad(graph, grads, p) for p in graph.params])


def chain_backprop(stages: Sequence[tuple[Callable, Sequence[np.ndarray]]], x0, loss: Callable,
                   bn_mode: str = "train"):
    """Reference end-to-end backpropagation over a chain of stage functions.

    Every stage graph is kept from the forward pass. ``loss(graph, y)`` maps
    the last stage output to a scalar handle. Returns the loss value and one
    :class:`GradPair` per stage.
    """
    graphs = []
    x = x0
    for f, theta in stages:
        x, g = record(f, x, theta, bn_mode=bn_mode)
        graphs.append(g)
    value, lg = record(lambda g, y, _: loss(g, y), x, [], bn_mode=bn_mode)
    delta = vjp(lg, np.ones_like(value)).input_grad
    out = []
    for g in reversed(graphs):
        gp = vjp(g, delta)
        out.append(gp)
        delta = gp.input_grad
    out.reverse()
    return float(value), out


# -- core primitives ---------------------------------------------------------

@register("identity")
class _Identity:
    @staticmethod
    def forward(x):
        return x, ()

    @staticmethod
    def vjp(g, saved):
        return (g,)


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        return T.add(a, b), ()

    @staticmethod
    def vjp(g, saved):
        return g, g


@register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        return T.sub(a, b), ()

    @staticmethod
    def vjp(g, saved):
        return g, -g


@register("scale")
class _Scale:
    @staticmethod
    def forward(a, c):
        return T.scale(a, c), ()

    @staticmethod
    def vjp(g, saved, c):
        return (T.scale(g, c),)


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        return T.matmul(a, b), (a, b)

    @staticmethod
    def vjp(g, saved):
        a, b = saved
        return g @ b.T, a.T @ g


@register("linear")
class _Linear:
    """x @ W.T with W stored as (out_features, in_features)."""

    @staticmethod
    def forward(x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise T.ShapeError("linear", x.shape, w.shape)
        return x @ w.T, (x, w)

    @staticmethod
    def vjp(g, saved):
        x, w = saved
        return g @ w, g.T @ x


@register("bias")
class _Bias:
    @staticmethod
    def forward(x, b):
        return T.add_channel_bias(x, b), ()

    @staticmethod
    def vjp(g, saved):
        axes = (0,) + tuple(range(2, g.ndim))
        return g, g.sum(axis=axes)


@register("relu")
class _Relu:
    @staticmethod
    def forward(x):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), (mask,)

    @staticmethod
    def vjp(g, saved):
        (mask,) = saved
        return (np.where(mask, g, g.dtype.type(0)),)


@register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(x, w, stride=1, padding=0):
        return T.conv2d(x, w, stride, padding), (x, w)

    @staticmethod
    def vjp(g, saved, stride=1, padding=0):
        x, w = saved
        return (T.conv2d_grad_input(g, w, x.shape, stride, padding),
                T.conv2d_grad_weight(g, x, w.shape, stride, padding))


@register("avgpool")
class _AvgPool:
    @staticmethod
    def forward(x, kernel, stride=None):
        return T.avgpool2d(x, kernel, stride), (x.shape,)

    @staticmethod
    def vjp(g, saved, kernel, stride=None):
        return (T.avgpool2d_grad(g, saved[0], kernel, stride),)


@register("maxpool")
class _MaxPool:
    @staticmethod
    def forward(x, kernel, stride=None, padding=0):
        out, idx = T.maxpool2d(x, kernel, stride, padding)
        return out, (idx, x.shape)

    @staticmethod
    def vjp(g, saved, kernel, stride=None, padding=0):
        idx, shape = saved
        return (T.maxpool2d_grad(g, idx, shape, kernel, stride, padding),)


@register("global_avgpool")
class _GlobalAvgPool:
    @staticmethod
    def forward(x):
        return x.mean(axis=(2, 3)), (x.shape,)

    @staticmethod
    def vjp(g, saved):
        shape = saved[0]
        scale = g.dtype.type(1.0 / (shape[2] * shape[3]))
        return (np.broadcast_to((g * scale)[:, :, None, None], shape).copy(),)


@register("split_channels", n_out=2)
class _Split:
    @staticmethod
    def forward(x):
        return T.split_channels(x), ()

    @staticmethod
    def vjp(gs, saved):
        return (T.concat_channels(*gs),)


@register("concat_channels")
class _Concat:
    @staticmethod
    def forward(a, b):
        return T.concat_channels(a, b), (a.shape[1],)

    @staticmethod
    def vjp(g, saved):
        c = saved[0]
        return np.ascontiguousarray(g[:, :c]), np.ascontiguousarray(g[:, c:])


@register("flatten")
class _Flatten:
    @staticmethod
    def forward(x):
        return x.reshape(x.shape[0], -1), (x.shape,)

    @staticmethod
    def vjp(g, saved):
        return (g.reshape(saved[0]),)
