"""Dense-tensor computation graphs with reverse-mode differentiation.

A Graph is an append-only list of nodes; construction order is the
topological order used by forward() and backward(). Leaves come in two
kinds: parameters (differentiated, bound by name) and inputs (bound by
name, never differentiated; integer index arrays go here). Constants are
baked in at construction time.

Graphs are lazy: building one computes nothing. forward() evaluates every
node for a given binding of the leaves and is re-runnable with new
bindings, which is what finite_diff_check() exploits. A graph instance is
single-threaded; independent instances are independent.

The module also exports small dispatch helpers (tanh, matmul, softmax, ...)
that operate on either plain numpy arrays or Nodes, so model equations can
be written once and reused for both differentiable graphs and fast
inference on raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class TapeError(Exception):
    """Base class for graph construction/execution failures."""


class ShapeMismatch(TapeError):
    """Operand shapes incompatible for an op; message names both operands."""


class NonFiniteValue(TapeError):
    """An op produced NaN or Inf during forward()."""


class NonScalarLoss(TapeError):
    """backward() was asked to differentiate a non-scalar node."""


class GraphStateError(TapeError):
    """Missing state: an unbound leaf, or backward() before forward()."""


class Node:
    """Handle to one graph node. Supports +, -, *, @ against Nodes,
    numpy arrays and scalars (non-Nodes are lifted to constants)."""

    __slots__ = ("graph", "idx", "op", "parents", "payload", "name")

    # keep numpy from consuming `ndarray <op> Node`; fall back to our
    # reflected operators instead
    __array_ufunc__ = None

    def __init__(self, graph, idx, op, parents=(), payload=None, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.parents = parents
        self.payload = payload
        self.name = name

    def label(self):
        return self.name if self.name is not None else f"{self.op}#{self.idx}"

    def __repr__(self):
        return f"<Node {self.label()}>"

    @property
    def value(self):
        if self.graph.values is None:
            raise GraphStateError("forward() has not been run on this graph")
        return self.graph.values[self.idx]

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return self.graph.matmul(self._lift(other), self)

    def __neg__(self):
        return self.graph.mul(self, self._lift(-1.0))


class Graph:
    """Append-only op graph. dtype fixes the floating precision of every
    constant and parameter (float64 for gradient checking, float32 allowed
    for training speed). check_finite guards every forward value."""

    def __init__(self, dtype=np.float64, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}
        self.named: dict[str, Node] = {}
        self.values = None
        self.grads = None

    # -- construction ------------------------------------------------------

    def _append(self, op, parents=(), payload=None, name=None):
        node = Node(self, len(self.nodes), op, tuple(parents), payload, name)
        self.nodes.append(node)
        return node

    def param(self, name):
        """Differentiable leaf, bound by name at forward() time."""
        if name in self.params or name in self.inputs:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = self._append("leaf", name=name)
        self.params[name] = node
        self.named[name] = node
        return node

    def input(self, name):
        """Non-differentiable leaf (activations never flow back into it)."""
        if name in self.params or name in self.inputs:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = self._append("leaf", name=name)
        self.inputs[name] = node
        self.named[name] = node
        return node

    def const(self, value):
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            arr = arr.astype(self.dtype, copy=False)
        return self._append("const", payload=arr)

    def tag(self, node, name):
        """Expose an interior node in forward()'s result dict."""
        node.name = name
        self.named[name] = node
        return node

    # -- primitive ops -----------------------------------------------------

    def add(self, a, b):
        return self._append("add", (a, b))

    def sub(self, a, b):
        return self._append("sub", (a, b))

    def mul(self, a, b):
        return self._append("mul", (a, b))

    def matmul(self, a, b):
        return self._append("matmul", (a, b))

    def tanh(self, a):
        return self._append("tanh", (a,))

    def sigmoid(self, a):
        return self._append("sigmoid", (a,))

    def exp(self, a):
        return self._append("exp", (a,))

    def log(self, a):
        return self._append("log", (a,))

    def concat(self, parts, axis=0):
        return self._append("concat", tuple(parts), payload=axis)

    def mean(self, a, axis=None, keepdims=False):
        return self._append("mean", (a,), payload=(axis, keepdims))

    def reduce_sum(self, a, axis=None, keepdims=False):
        return self._append("sum", (a,), payload=(axis, keepdims))

    def softmax(self, a, axis=-1):
        return self._append("softmax", (a,), payload=axis)

    def log_softmax(self, a, axis=-1):
        return self._append("log_softmax", (a,), payload=axis)

    def take(self, a, idx, axis=0):
        """Index rows (axis 0) or columns (axis 1) of a by an integer node."""
        if not isinstance(idx, Node):
            idx = self.const(np.asarray(idx))
        if axis not in (0, 1):
            raise ValueError("take supports axis 0 or 1")
        return self._append("take", (a, idx), payload=axis)

    def slice_(self, a, key):
        """Basic slicing; key is a tuple of slice objects only."""
        key = tuple(key)
        if not all(isinstance(k, slice) for k in key):
            raise ValueError("slice_ key must contain slice objects only")
        return self._append("slice", (a,), payload=key)

    def transpose(self, a):
        return self._append("transpose", (a,))

    def reshape(self, a, shape):
        return self._append("reshape", (a,), payload=tuple(shape))


# -- forward ---------------------------------------------------------------


def _np_softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _np_log_softmax(x, axis=-1):
    s = x - np.max(x, axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _binary_shapes(node, pa, pb):
    a, b = node.parents
    return f"{a.label()} {pa.shape} vs {b.label()} {pb.shape}"


def _eval(node, vals):
    op = node.op
    p = node.parents
    if op in ("add", "sub", "mul"):
        pa, pb = vals[p[0].idx], vals[p[1].idx]
        try:
            if op == "add":
                return pa + pb
            if op == "sub":
                return pa - pb
            return pa * pb
        except ValueError:
            raise ShapeMismatch(f"{op}: {_binary_shapes(node, pa, pb)}") from None
    if op == "matmul":
        pa, pb = vals[p[0].idx], vals[p[1].idx]
        if not 1 <= pa.ndim <= 2 or not 1 <= pb.ndim <= 2:
            raise ShapeMismatch(f"matmul needs 1-D/2-D operands: {_binary_shapes(node, pa, pb)}")
        if pa.shape[-1] != pb.shape[0]:
            raise ShapeMismatch(f"matmul: {_binary_shapes(node, pa, pb)}")
        return pa @ pb
    x = vals[p[0].idx]
    if op == "tanh":
        return np.tanh(x)
    if op == "sigmoid":
        return expit(x)
    if op == "exp":
        return np.exp(x)
    if op == "log":
        return np.log(x)
    if op == "concat":
        parts = [vals[q.idx] for q in p]
        try:
            return np.concatenate(parts, axis=node.payload)
        except ValueError:
            shapes = ", ".join(f"{q.label()} {vals[q.idx].shape}" for q in p)
            raise ShapeMismatch(f"concat(axis={node.payload}): {shapes}") from None
    if op == "mean":
        axis, keepdims = node.payload
        return np.mean(x, axis=axis, keepdims=keepdims)
    if op == "sum":
        axis, keepdims = node.payload
        return np.sum(x, axis=axis, keepdims=keepdims)
    if op == "softmax":
        return _np_softmax(x, node.payload)
    if op == "log_softmax":
        return _np_log_softmax(x, node.payload)
    if op == "take":
        idx = vals[p[1].idx]
        try:
            return np.take(x, idx, axis=node.payload)
        except IndexError:
            raise ShapeMismatch(
                f"take(axis={node.payload}): index {p[1].label()} out of range "
                f"for {p[0].label()} {x.shape}"
            ) from None
    if op == "slice":
        return x[node.payload]
    if op == "transpose":
        return x.T
    if op == "reshape":
        return x.reshape(node.payload)
    raise TapeError(f"unknown op {op!r}")


def forward(graph, bindings):
    """Evaluate every node under the given leaf bindings.

    Returns a dict of values for every named node (leaves plus anything
    tagged). Deterministic and pure: identical bindings give bitwise
    identical results. Raises ShapeMismatch / NonFiniteValue as errors.
    """
    vals = [None] * len(graph.nodes)
    check = graph.check_finite
    for node in graph.nodes:
        op = node.op
        if op == "leaf":
            try:
                v = np.asarray(bindings[node.name])
            except KeyError:
                raise GraphStateError(f"leaf {node.name!r} is not bound") from None
            if v.dtype.kind == "f":
                v = v.astype(graph.dtype, copy=False)
        elif op == "const":
            v = node.payload
        else:
            v = _eval(node, vals)
            if check and v.dtype.kind == "f" and not np.isfinite(v).all():
                raise NonFiniteValue(f"non-finite result at {node.label()}")
        vals[node.idx] = v
    graph.values = vals
    return {name: vals[n.idx] for name, n in graph.named.items()}


# -- backward ----------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g over axes that numpy broadcasting introduced or stretched."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(grads, node, g):
    if grads[node.idx] is None:
        grads[node.idx] = g
    else:
        grads[node.idx] = grads[node.idx] + g


def _backprop(node, g, vals, grads):
    op = node.op
    p = node.parents
    if op in ("add", "sub"):
        pa, pb = vals[p[0].idx], vals[p[1].idx]
        _acc(grads, p[0], _unbroadcast(g, pa.shape))
        gb = _unbroadcast(g, pb.shape)
        _acc(grads, p[1], gb if op == "add" else -gb)
        return
    if op == "mul":
        pa, pb = vals[p[0].idx], vals[p[1].idx]
        _acc(grads, p[0], _unbroadcast(g * pb, pa.shape))
        _acc(grads, p[1], _unbroadcast(g * pa, pb.shape))
        return
    if op == "matmul":
        pa, pb = vals[p[0].idx], vals[p[1].idx]
        a2 = pa if pa.ndim == 2 else pa.reshape(1, -1)
        b2 = pb if pb.ndim == 2 else pb.reshape(-1, 1)
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        _acc(grads, p[0], (g2 @ b2.T).reshape(pa.shape))
        _acc(grads, p[1], (a2.T @ g2).reshape(pb.shape))
        return
    x = vals[p[0].idx]
    y = vals[node.idx]
    if op == "tanh":
        _acc(grads, p[0], g * (1.0 - y * y))
    elif op == "sigmoid":
        _acc(grads, p[0], g * y * (1.0 - y))
    elif op == "exp":
        _acc(grads, p[0], g * y)
    elif op == "log":
        _acc(grads, p[0], g / x)
    elif op == "concat":
        axis = node.payload
        offset = 0
        for q in p:
            n = vals[q.idx].shape[axis]
            key = [slice(None)] * g.ndim
            key[axis] = slice(offset, offset + n)
            _acc(grads, q, g[tuple(key)])
            offset += n
    elif op in ("mean", "sum"):
        axis, keepdims = node.payload
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        if op == "mean":
            n = x.size if axis is None else x.shape[axis]
            gg = gg / n
        _acc(grads, p[0], np.broadcast_to(gg, x.shape))
    elif op == "softmax":
        axis = node.payload
        _acc(grads, p[0], y * (g - (g * y).sum(axis=axis, keepdims=True)))
    elif op == "log_softmax":
        axis = node.payload
        _acc(grads, p[0], g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    elif op == "take":
        axis = node.payload
        idx = vals[p[1].idx]
        gx = np.zeros_like(x)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(gx.T, idx, np.asarray(g).T)
        _acc(grads, p[0], gx)
    elif op == "slice":
        gx = np.zeros_like(x)
        gx[node.payload] = g
        _acc(grads, p[0], gx)
    elif op == "transpose":
        _acc(grads, p[0], g.T)
    elif op == "reshape":
        _acc(grads, p[0], g.reshape(x.shape))
    else:
        raise TapeError(f"unknown op {op!r}")


def backward(graph, loss=None):
    """Gradients of a scalar loss node w.r.t. every parameter leaf.

    loss defaults to the last node. forward() must have run already.
    Parameters the loss never touches get zero gradients of the bound
    shape. The gradient of the loss w.r.t. itself is 1.
    """
    if graph.values is None:
        raise GraphStateError("backward() requires a prior forward()")
    if loss is None:
        loss = graph.nodes[-1]
    lv = np.asarray(graph.values[loss.idx])
    if lv.size != 1:
        raise NonScalarLoss(f"loss {loss.label()} has shape {lv.shape}")
    vals = graph.values
    grads = [None] * len(graph.nodes)
    grads[loss.idx] = np.ones_like(lv)
    for idx in range(loss.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        if node.op in ("leaf", "const"):
            continue
        _backprop(node, g, vals, grads)
    graph.grads = grads
    out = {}
    for name, pnode in graph.params.items():
        g = grads[pnode.idx]
        out[name] = g if g is not None else np.zeros_like(vals[pnode.idx])
    return out


# -- finite-difference oracle -------------------------------------------------


@dataclass
class FiniteDiffReport:
    """Per-parameter max relative error of backward() vs central differences."""

    step: float
    tolerance: float
    rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.rel_err.values()) if self.rel_err else 0.0

    @property
    def passed(self):
        return self.worst < self.tolerance

    def __str__(self):
        lines = [f"finite-difference check (step={self.step:g}, tol={self.tolerance:g})"]
        for name in sorted(self.rel_err):
            e = self.rel_err[name]
            lines.append(f"  {'ok ' if e < self.tolerance else 'BAD'} {name}: {e:.3e}")
        lines.append(f"  worst {self.worst:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _loss_value(graph, bindings, loss):
    forward(graph, bindings)
    return float(graph.values[loss.idx])


def finite_diff_check(graph, bindings, step=1e-5, tolerance=1e-4, loss=None):
    """Compare backward() gradients against central finite differences.

    Report only, never raises on mismatch. Requires a 64-bit graph.
    Relative error is |a - f| / max(|a|, |f|, 1e-4); the floor keeps FD
    roundoff from dominating near-zero entries.
    """
    if graph.dtype != np.float64:
        raise TapeError("finite_diff_check requires a float64 graph")
    if loss is None:
        loss = graph.nodes[-1]
    prev_check = graph.check_finite
    graph.check_finite = False
    try:
        forward(graph, bindings)
        analytic = backward(graph, loss)
        report = FiniteDiffReport(step=step, tolerance=tolerance)
        work = dict(bindings)
        for name in graph.params:
            theta = np.array(bindings[name], dtype=np.float64)
            work[name] = theta
            flat = theta.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = _loss_value(graph, work, loss)
                flat[i] = orig - step
                lm = _loss_value(graph, work, loss)
                flat[i] = orig
                fd[i] = (lp - lm) / (2.0 * step)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-4)
            report.rel_err[name] = float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
            work[name] = bindings[name]
        forward(graph, bindings)  # leave the graph in its unperturbed state
        return report
    finally:
        graph.check_finite = prev_check


# -- array/Node dispatch helpers ----------------------------------------------
#
# Model equations are written once against these; they route to graph ops when
# any argument is a Node and to plain numpy otherwise.


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    return None


def _as_node(g, x):
    return x if isinstance(x, Node) else g.const(x)


def tanh(x):
    return x.graph.tanh(x) if isinstance(x, Node) else np.tanh(x)


def sigmoid(x):
    return x.graph.sigmoid(x) if isinstance(x, Node) else expit(x)


def exp(x):
    return x.graph.exp(x) if isinstance(x, Node) else np.exp(x)


def log(x):
    return x.graph.log(x) if isinstance(x, Node) else np.log(x)


def matmul(a, b):
    g = _graph_of(a, b)
    if g is None:
        return a @ b
    return g.matmul(_as_node(g, a), _as_node(g, b))


def softmax(x, axis=-1):
    return x.graph.softmax(x, axis) if isinstance(x, Node) else _np_softmax(x, axis)


def log_softmax(x, axis=-1):
    return x.graph.log_softmax(x, axis) if isinstance(x, Node) else _np_log_softmax(x, axis)


def concat(parts, axis=0):
    g = _graph_of(*parts)
    if g is None:
        return np.concatenate(parts, axis=axis)
    return g.concat([_as_node(g, p) for p in parts], axis=axis)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.graph.mean(x, axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def reduce_sum(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.graph.reduce_sum(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def take(x, idx, axis=0):
    if isinstance(x, Node):
        return x.graph.take(x, idx, axis=axis)
    return np.take(x, idx, axis=axis)


def rows(x, t0, t1):
    """Row block x[t0:t1, :] (keeps the leading axis)."""
    if isinstance(x, Node):
        return x.graph.slice_(x, (slice(t0, t1),))
    return x[t0:t1]


def transpose(x):
    return x.graph.transpose(x) if isinstance(x, Node) else x.T


def reshape(x, shape):
    if isinstance(x, Node):
        return x.graph.reshape(x, shape)
    return np.reshape(x, shape)
