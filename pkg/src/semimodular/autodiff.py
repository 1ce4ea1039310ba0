"""Reverse-mode differentiation tape with a stop-gradient operator.

Every loss in this package is assembled from the operations here, so exact
gradients are available for stochastic optimisation.  Nodes hold numpy array
values (a scalar is a 0-d array); hot paths such as spline transformers and
perceptron layers therefore run as vectorised array operations with
hand-written vector-Jacobian rules rather than element-by-element scalar
records.  All rules are covered by the finite-difference suite in the tests.

The numeric primitive set is fixed: add, sub, mul, div, neg, exp, log, tanh,
sigmoid, softplus, power, sum, dot and log-gamma.  The remaining operations
(concat, take, where, cumsum, reshape) are layout plumbing with exact linear
adjoints.  Every operation accepts plain arrays as well as nodes and returns
the matching kind, so the same model code runs with or without a tape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp


class NonFiniteError(FloatingPointError):
    """Raised when an operation on the tape produces a non-finite value."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class Node:
    """One record on the tape: an array value plus parent edges.

    Each parent edge carries a vector-Jacobian rule mapping the cotangent of
    this node to a cotangent contribution for the parent.  The dependency
    graph is acyclic by construction (nodes only reference nodes that already
    exist).
    """

    __slots__ = ("value", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = value
        self.parents = parents
        self.op = op

    @property
    def shape(self):
        return np.shape(self.value)

    # Arithmetic sugar so formulas read naturally.
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    """Underlying array of a node, or the input itself for plain data."""
    return x.value if isinstance(x, Node) else x


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _make(value, parents, op):
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        # Fail fast rather than clamp: silent clamping corrupts gradient
        # checks downstream.
        raise NonFiniteError(op)
    return Node(value, parents, op)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# numeric primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if not (is_node(a) or is_node(b)):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    parents = []
    if is_node(a):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if is_node(b):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))
    return _make(out, tuple(parents), "add")


def sub(a, b):
    if not (is_node(a) or is_node(b)):
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    parents = []
    if is_node(a):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if is_node(b):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))
    return _make(out, tuple(parents), "sub")


def mul(a, b):
    if not (is_node(a) or is_node(b)):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    parents = []
    if is_node(a):
        parents.append((a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s)))
    if is_node(b):
        parents.append((b, lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s)))
    return _make(out, tuple(parents), "mul")


def div(a, b):
    if not (is_node(a) or is_node(b)):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    parents = []
    if is_node(a):
        parents.append((a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g / o, s)))
    if is_node(b):
        parents.append(
            (b, lambda g, n=av, d=bv, s=np.shape(bv): _unbroadcast(-g * n / (d * d), s))
        )
    return _make(out, tuple(parents), "div")


def neg(a):
    if not is_node(a):
        return np.negative(a)
    return _make(np.negative(a.value), ((a, lambda g: -g),), "neg")


def exp(a):
    if not is_node(a):
        return np.exp(a)
    out = np.exp(a.value)
    return _make(out, ((a, lambda g, o=out: g * o),), "exp")


def log(a):
    if not is_node(a):
        return np.log(a)
    return _make(np.log(a.value), ((a, lambda g, x=a.value: g / x),), "log")


def tanh(a):
    if not is_node(a):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _make(out, ((a, lambda g, o=out: g * (1.0 - o * o)),), "tanh")


def _sigmoid_raw(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    if not is_node(a):
        return _sigmoid_raw(a)
    out = _sigmoid_raw(a.value)
    return _make(out, ((a, lambda g, o=out: g * o * (1.0 - o)),), "sigmoid")


def _softplus_raw(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    if not is_node(a):
        return _softplus_raw(a)
    out = _softplus_raw(a.value)
    return _make(out, ((a, lambda g, x=a.value: g * _sigmoid_raw(x)),), "softplus")


def power(a, exponent):
    """Elementwise a**exponent for a constant real exponent."""
    if not is_node(a):
        return np.power(a, exponent)
    out = np.power(a.value, exponent)
    return _make(
        out,
        ((a, lambda g, x=a.value, p=exponent: g * p * np.power(x, p - 1.0)),),
        "power",
    )


def square(a):
    return power(a, 2.0)


def sqrt(a):
    return power(a, 0.5)


def vsum(a, axis=None):
    if not is_node(a):
        return np.sum(a, axis=axis)
    out = np.sum(a.value, axis=axis)

    def vjp(g, shape=a.value.shape, ax=axis):
        if ax is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, ax), shape)

    return _make(out, ((a, vjp),), "sum")


def mean(a, axis=None):
    n = np.shape(value_of(a))
    if axis is None:
        count = int(np.prod(n)) if n else 1
    else:
        count = n[axis]
    return div(vsum(a, axis=axis), float(count))


def dot(a, b):
    """Matrix product (numpy matmul semantics for 1-D/2-D operands)."""
    if not (is_node(a) or is_node(b)):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    parents = []
    if is_node(a):
        def vjp_a(g, bvv=bv, ash=np.shape(av)):
            if g.ndim == 0:  # vector . vector
                return g * bvv
            if bvv.ndim == 1:
                return np.multiply.outer(g, bvv) if len(ash) == 2 else g * bvv
            ga = np.matmul(g, np.swapaxes(bvv, -1, -2))
            return _unbroadcast(ga, ash)

        parents.append((a, vjp_a))
    if is_node(b):
        def vjp_b(g, avv=av, bsh=np.shape(bv)):
            if g.ndim == 0:
                return g * avv
            if avv.ndim == 1:
                return np.multiply.outer(avv, g) if len(bsh) == 2 else avv * g
            gb = np.matmul(np.swapaxes(avv, -1, -2), g)
            return _unbroadcast(gb, bsh)

        parents.append((b, vjp_b))
    return _make(out, tuple(parents), "dot")


def gammaln(a):
    """log-Gamma, needed by Binomial and Poisson likelihood terms."""
    if not is_node(a):
        return _sp.gammaln(a)
    out = _sp.gammaln(a.value)
    return _make(out, ((a, lambda g, x=a.value: g * _sp.digamma(x)),), "gammaln")


# ---------------------------------------------------------------------------
# layout plumbing (linear, exact adjoints)
# ---------------------------------------------------------------------------

def getitem(a, key):
    if not is_node(a):
        return np.asarray(a)[key]
    out = a.value[key]

    def vjp(g, shape=a.value.shape, k=key):
        full = np.zeros(shape)
        np.add.at(full, k, g)
        return full

    return _make(out, ((a, vjp),), "getitem")


def take(a, indices, axis):
    """Gather along an axis; adjoint scatter-adds (indices may repeat)."""
    if not is_node(a):
        return np.take(a, indices, axis=axis)
    out = np.take(a.value, indices, axis=axis)

    def vjp(g, shape=a.value.shape, idx=np.asarray(indices), ax=axis):
        full = np.zeros(shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return full

    return _make(out, ((a, vjp),), "take")


def take_along(a, indices, axis):
    if not is_node(a):
        return np.take_along_axis(a, indices, axis=axis)
    out = np.take_along_axis(a.value, indices, axis=axis)

    def vjp(g, shape=a.value.shape, idx=indices, ax=axis):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=ax)
        return full

    return _make(out, ((a, vjp),), "take_along")


def concat(parts, axis=-1):
    if not any(is_node(p) for p in parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        if not is_node(p):
            continue

        def vjp(g, lo=offsets[i], hi=offsets[i + 1], ax=axis):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((p, vjp))
    return _make(out, tuple(parents), "concat")


def reshape(a, shape):
    if not is_node(a):
        return np.reshape(a, shape)
    out = np.reshape(a.value, shape)
    return _make(out, ((a, lambda g, s=a.value.shape: np.reshape(g, s)),), "reshape")


def where(mask, a, b):
    """Select by a constant boolean mask (mask never carries gradient)."""
    mask = np.asarray(value_of(mask), dtype=bool)
    if not (is_node(a) or is_node(b)):
        return np.where(mask, a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    parents = []
    if is_node(a):
        parents.append((a, lambda g, m=mask, s=np.shape(av): _unbroadcast(np.where(m, g, 0.0), s)))
    if is_node(b):
        parents.append((b, lambda g, m=mask, s=np.shape(bv): _unbroadcast(np.where(m, 0.0, g), s)))
    return _make(out, tuple(parents), "where")


def cumsum(a, axis=-1):
    if not is_node(a):
        return np.cumsum(a, axis=axis)
    out = np.cumsum(a.value, axis=axis)

    def vjp(g, ax=axis):
        return np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax)

    return _make(out, ((a, vjp),), "cumsum")


def stop_gradient(a):
    """Identity on values; contributes exactly zero to every gradient."""
    if not is_node(a):
        return a
    return Node(a.value, (), "stop_gradient")


def logsumexp(a, axis=None):
    """log-sum-exp built from primitives; the shift is gradient-stopped.

    With m constant, d/dx [m + log sum exp(x - m)] is the exact softmax, so
    stopping the max shift does not bias gradients.
    """
    m = np.max(value_of(a), axis=axis, keepdims=True)
    shifted = sub(a, m)
    s = log(vsum(exp(shifted), axis=axis))
    return add(s, np.squeeze(m, axis=axis) if axis is not None else np.squeeze(m))


LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, loc, scale_sq):
    """Gaussian log density with variance argument, broadcastable."""
    d = sub(x, loc)
    return mul(-0.5, add(log(mul(2.0 * math.pi, scale_sq)), div(mul(d, d), scale_sq)))


# ---------------------------------------------------------------------------
# parameter stores and the gradient driver
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named blocks of flat real vectors (lambda1, alpha, eta, ...).

    Gradients come back in an identical layout.  Block names are unique by
    dict construction; values are float64 1-d arrays.
    """

    def __init__(self, blocks):
        self.blocks = {name: _asarray(v).ravel() for name, v in blocks.items()}

    def __getitem__(self, name):
        return self.blocks[name]

    def __setitem__(self, name, v):
        self.blocks[name] = _asarray(v).ravel()

    def __contains__(self, name):
        return name in self.blocks

    def names(self):
        return list(self.blocks)

    def sizes(self):
        return {k: v.size for k, v in self.blocks.items()}

    def total_size(self):
        return sum(v.size for v in self.blocks.values())

    def copy(self):
        return ParameterStore({k: v.copy() for k, v in self.blocks.items()})

    def flat(self):
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([self.blocks[k] for k in self.blocks])

    def from_flat(self, flat):
        flat = _asarray(flat).ravel()
        if flat.size != self.total_size():
            raise ValueError("flat vector length does not match store layout")
        out = {}
        pos = 0
        for k, v in self.blocks.items():
            out[k] = flat[pos:pos + v.size].copy()
            pos += v.size
        return ParameterStore(out)

    def items(self):
        return self.blocks.items()

    def __repr__(self):
        return f"ParameterStore({self.sizes()})"


def backward(root: Node, leaves):
    """Cotangents of `root` (a scalar node) for each node in `leaves`."""
    root_val = np.asarray(root.value)
    if root_val.shape != ():
        raise ValueError("backward expects a scalar output node")
    # Topological order via iterative depth-first search.
    order = []
    seen = set()
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contribution if prev is None else prev + contribution
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(np.shape(leaf.value))
        out.append(np.broadcast_to(np.asarray(g, dtype=np.float64), np.shape(leaf.value)).copy())
    return out


def grad(f, at: ParameterStore, return_value=False):
    """Gradient of a scalar function of a ParameterStore.

    `f` receives a dict mapping block names to leaf nodes and must return a
    scalar node (or plain scalar, in which case the gradient is zero).
    Deterministic given inputs; raises NonFiniteError if any intermediate is
    non-finite.
    """
    leaves = {name: Node(v.copy()) for name, v in at.items()}
    out = f(leaves)
    if not is_node(out):
        val = float(out)
        if not math.isfinite(val):
            raise NonFiniteError("output")
        g = ParameterStore({name: np.zeros(v.size) for name, v in at.items()})
        return (g, val) if return_value else g
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("output")
    gs = backward(out, [leaves[name] for name in at.names()])
    gstore = ParameterStore({name: g for name, g in zip(at.names(), gs)})
    if return_value:
        return gstore, float(out.value)
    return gstore
