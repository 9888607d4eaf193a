"""Small reverse-mode automatic differentiation over numpy arrays.

The tape is dynamic: every operation eagerly computes its value and records
its parents together with a closure that pushes the output gradient back to
them. Calling :meth:`Node.backward` on a scalar root walks the graph in
reverse topological order.

Only the handful of primitives needed by the supernet and the saliency
proxies are provided. Broadcasting is limited to matrix + row-vector
(bias add) and scalar * array (mixture weights).
"""
from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op, left, right):
        super().__init__(f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}")
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A loss or gradient evaluation produced inf/nan."""

    def __init__(self, msg, eps=None):
        super().__init__(msg)
        self.eps = eps


class Node:
    """A value in the computation graph.

    ``grad`` is allocated with the shape of ``value`` whenever the node takes
    part in a backward pass and ``requires_grad`` is set.
    """

    __slots__ = ("value", "grad", "op_tag", "parents", "requires_grad", "_backward", "name")

    def __init__(self, value, requires_grad=False, op_tag="leaf", parents=(), name=None):
        self.value = None if value is None else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op_tag = op_tag
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op_tag}, shape={None if self.value is None else self.value.shape})"

    def item(self):
        return float(self.value)

    def backward(self):
        """Fill ``grad`` on every differentiable node reachable from this one."""
        if self.value is None:
            raise GraphError("backward called before the graph was evaluated")
        if self.value.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.value.shape}")
        order = _topological(self)
        for node in order:
            if node.requires_grad:
                node.grad = np.zeros_like(node.value)
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_node(other), -1.0))

    def __rsub__(self, other):
        return add(as_node(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def constant(x):
    return Node(x, requires_grad=False, op_tag="const")


def param(x, name=None):
    return Node(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(value, op_tag, parents, backward):
    out = Node(value, requires_grad=any(p.requires_grad for p in parents), op_tag=op_tag, parents=parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _acc(node, g):
    if node.requires_grad:
        node.grad += g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        def backward(g):
            _acc(a, g)
            _acc(b, g)
    elif a.value.ndim == 2 and b.value.ndim == 1 and sa[1] == sb[0]:
        def backward(g):
            _acc(a, g)
            _acc(b, g.sum(axis=0))
    elif b.value.ndim == 2 and a.value.ndim == 1 and sb[1] == sa[0]:
        return add(b, a)
    elif a.value.size == 1 or b.value.size == 1:
        def backward(g):
            _acc(a, g if a.value.shape == g.shape else np.reshape(g.sum(), sa))
            _acc(b, g if b.value.shape == g.shape else np.reshape(g.sum(), sb))
    else:
        raise ShapeError("add", sa, sb)
    return _make(a.value + b.value, "add", (a, b), backward)


def mul(a, b):
    """Elementwise product; one operand may be a scalar."""
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and a.value.size != 1 and b.value.size != 1:
        raise ShapeError("mul", sa, sb)

    def backward(g):
        if a.requires_grad:
            ga = g * b.value
            a.grad += ga if ga.shape == sa else np.reshape(ga.sum(), sa)
        if b.requires_grad:
            gb = g * a.value
            b.grad += gb if gb.shape == sb else np.reshape(gb.sum(), sb)

    return _make(a.value * b.value, "mul", (a, b), backward)


def matmul(a, b):
    """Matrix-matrix or matrix-vector product."""
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or sa[1] != sb[0]:
        raise ShapeError("matmul", sa, sb)

    if b.value.ndim == 1:
        def backward(g):
            _acc(a, np.outer(g, b.value))
            _acc(b, a.value.T @ g)
    else:
        def backward(g):
            _acc(a, g @ b.value.T)
            _acc(b, a.value.T @ g)

    return _make(a.value @ b.value, "matmul", (a, b), backward)


def relu(a):
    a = as_node(a)
    mask = a.value > 0

    def backward(g):
        _acc(a, g * mask)

    return _make(a.value * mask, "relu", (a,), backward)


def tanh(a):
    a = as_node(a)
    t = np.tanh(a.value)

    def backward(g):
        _acc(a, g * (1.0 - t * t))

    return _make(t, "tanh", (a,), backward)


def exp(a):
    a = as_node(a)
    e = np.exp(a.value)

    def backward(g):
        _acc(a, g * e)

    return _make(e, "exp", (a,), backward)


def log(a):
    a = as_node(a)

    def backward(g):
        _acc(a, g / a.value)

    return _make(np.log(a.value), "log", (a,), backward)


def absolute(a):
    a = as_node(a)
    sign = np.sign(a.value)

    def backward(g):
        _acc(a, g * sign)

    return _make(np.abs(a.value), "abs", (a,), backward)


def total(a):
    """Sum of all entries, returned as a scalar node."""
    a = as_node(a)

    def backward(g):
        _acc(a, np.broadcast_to(g, a.value.shape))

    return _make(np.asarray(a.value.sum()), "sum", (a,), backward)


def mean(a):
    a = as_node(a)
    n = a.value.size

    def backward(g):
        _acc(a, np.broadcast_to(g / n, a.value.shape))

    return _make(np.asarray(a.value.mean()), "mean", (a,), backward)


def softmax(a):
    """Softmax along the last axis (rowwise for matrices)."""
    a = as_node(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, "softmax", (a,), backward)


def take(a, index):
    """Select ``a.value[index]`` (a scalar entry or a row)."""
    a = as_node(a)

    def backward(g):
        if a.requires_grad:
            a.grad[index] += g

    return _make(np.array(a.value[index]), "take", (a,), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` (batch x classes) against integer labels."""
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    x = logits.value
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError("cross_entropy", x.shape, labels.shape)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(x.shape[0])
    loss = np.mean(lse - x[rows, labels])

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        _acc(logits, g * p / x.shape[0])

    return _make(np.asarray(loss), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# graph-level helpers


def forward(root: Node) -> float:
    """Return the scalar value of an already-built graph."""
    if root.value is None:
        raise GraphError("graph root has no value")
    if root.value.size != 1:
        raise GraphError(f"expected a scalar root, got shape {root.value.shape}")
    return float(root.value)


def backward(root: Node) -> None:
    root.backward()


class ParamSet:
    """Ordered, named collection of trainable leaves.

    ``flatten``/``assign`` move between the leaves and one flat float64
    vector of length ``size``.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self.names: list[str] = []
        self.nodes: list[Node] = []
        for name, value in items:
            self.add(name, value)

    def add(self, name, value):
        if name in self.names:
            raise KeyError(f"duplicate parameter {name!r}")
        self.names.append(name)
        self.nodes.append(param(value, name=name))
        return self.nodes[-1]

    def __getitem__(self, name) -> Node:
        return self.nodes[self.names.index(name)]

    def __contains__(self, name):
        return name in self.names

    def __len__(self):
        return len(self.nodes)

    @property
    def shapes(self):
        return [n.value.shape for n in self.nodes]

    @property
    def size(self) -> int:
        return int(sum(n.value.size for n in self.nodes))

    def zero_grad(self):
        for n in self.nodes:
            n.grad = None

    def flatten(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros(0)
        return np.concatenate([n.value.ravel() for n in self.nodes])

    def flat_grad(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros(0)
        return np.concatenate(
            [(np.zeros(n.value.size) if n.grad is None else n.grad.ravel()) for n in self.nodes]
        )

    def assign(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError("assign", (self.size,), vec.shape)
        i = 0
        for n in self.nodes:
            k = n.value.size
            n.value = vec[i:i + k].reshape(n.value.shape).copy()
            i += k

    def unflatten(self, vec) -> "ParamSet":
        out = self.copy()
        out.assign(vec)
        return out

    def copy(self) -> "ParamSet":
        return ParamSet((name, n.value.copy()) for name, n in zip(self.names, self.nodes))

    def subset(self, names: Sequence[str]) -> "ParamSet":
        """A view sharing the leaves named in ``names``."""
        out = ParamSet()
        for name in names:
            out.names.append(name)
            out.nodes.append(self[name])
        return out

    def manifest(self):
        return [{"name": name, "shape": list(n.value.shape)} for name, n in zip(self.names, self.nodes)]


@contextmanager
def frozen(params: ParamSet):
    """Temporarily treat the leaves of ``params`` as constants."""
    flags = [n.requires_grad for n in params.nodes]
    for n in params.nodes:
        n.requires_grad = False
    try:
        yield
    finally:
        for n, f in zip(params.nodes, flags):
            n.requires_grad = f


def value_and_grad(loss_fn: Callable[[ParamSet], Node], p: ParamSet, vec=None):
    """Evaluate ``loss_fn`` (optionally at the flat point ``vec``) and its flat gradient."""
    if vec is not None:
        saved = p.flatten()
        p.assign(vec)
    try:
        p.zero_grad()
        root = loss_fn(p)
        val = forward(root)
        root.backward()
        g = p.flat_grad()
    finally:
        if vec is not None:
            p.assign(saved)
    return val, g


def default_eps(p_vec):
    return 1e-4 * (1.0 + float(np.max(np.abs(p_vec), initial=0.0)))


def hvp(loss_fn, p: ParamSet, v, eps=None) -> np.ndarray:
    """Central finite-difference Hessian-vector product of ``loss_fn`` at ``p``."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("hvp direction must be finite")
    if not np.any(v):
        return np.zeros_like(v)
    x = p.flatten()
    if eps is None:
        eps = default_eps(x)
    lp, gp = value_and_grad(loss_fn, p, x + eps * v)
    lm, gm = value_and_grad(loss_fn, p, x - eps * v)
    if not (np.isfinite(lp) and np.isfinite(lm)):
        raise NonFiniteError(f"non-finite loss at perturbed point (eps={eps:g})", eps=eps)
    return (gp - gm) / (2.0 * eps)


def numeric_grad(f: Callable[[np.ndarray], float], x, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
