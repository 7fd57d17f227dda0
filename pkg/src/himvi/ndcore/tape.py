"""Reverse-mode gradient tape over numpy arrays.

Every differentiable value is a :class:`Var` that points at a node on a
:class:`Tape`. Nodes are appended in evaluation order, so the tape is
topologically sorted by construction and the backward pass is a single
reverse sweep.

The primitive set is deliberately small: add, mul, matmul, relu, exp, log,
softplus, tanh, sum, mean and broadcast, plus the structural ops concat,
getitem and reshape. Everything else is composed from these.

Each op also accepts plain arrays; when none of its inputs is a ``Var`` it
returns a plain ``ndarray`` and records nothing. The same model code therefore
runs both on and off the tape.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ContractError",
    "Tape",
    "Var",
    "grad",
    "value_of",
    "add",
    "mul",
    "matmul",
    "relu",
    "exp",
    "log",
    "softplus",
    "tanh",
    "sum",
    "mean",
    "broadcast_to",
    "concat",
    "getitem",
    "reshape",
    "neg",
    "sub",
    "square",
    "reciprocal",
    "div",
    "sqrt",
    "log_sigmoid",
    "sigmoid",
]


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class _Node:
    __slots__ = ("op", "inputs", "vjps")

    def __init__(self, op: str, inputs: tuple[int, ...], vjps: tuple[Callable, ...]):
        self.op = op
        self.inputs = inputs
        self.vjps = vjps


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Register a leaf (a parameter or an input we differentiate against)."""
        return self._push("leaf", np.array(value, dtype=np.float64), ())

    def vars(self, params: Mapping[str, np.ndarray]) -> dict[str, "Var"]:
        return {k: self.var(v) for k, v in params.items()}

    def _push(self, op, value, parents) -> "Var":
        idx = len(self.nodes)
        inputs = tuple(p.idx for p, _ in parents)
        vjps = tuple(f for _, f in parents)
        for i in inputs:
            if i >= idx:
                raise ContractError("node input must precede the node")
        self.nodes.append(_Node(op, inputs, vjps))
        return Var(self, idx, value)


class Var:
    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __len__(self):
        return len(self.value)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def broadcast_to(x, shape):
    shape = tuple(shape)
    xv = value_of(x)
    if xv.shape == shape:
        return x
    out = np.broadcast_to(xv, shape).copy()
    if not isinstance(x, Var):
        return out
    in_shape = xv.shape
    return x.tape._push("broadcast", out, [(x, lambda g: _unbroadcast(g, in_shape))])


def _align(a, b):
    """Broadcast Var operands explicitly so add/mul see equal shapes."""
    shape = np.broadcast_shapes(value_of(a).shape, value_of(b).shape)
    if isinstance(a, Var):
        a = broadcast_to(a, shape)
    if isinstance(b, Var):
        b = broadcast_to(b, shape)
    return a, b


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return value_of(a) + value_of(b)
    a, b = _align(a, b)
    out = value_of(a) + value_of(b)
    parents = [(v, lambda g: g) for v in (a, b) if isinstance(v, Var)]
    return tape._push("add", out, parents)


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return value_of(a) * value_of(b)
    a, b = _align(a, b)
    av, bv = value_of(a), value_of(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: g * bv))
    if isinstance(b, Var):
        parents.append((b, lambda g: g * av))
    return tape._push("mul", av * bv, parents)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ContractError("matmul needs at least 1-d operands")
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ContractError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    tape = _tape_of(a, b)
    if tape is None:
        return av @ bv
    if av.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), value_of(b).shape[:-2] + value_of(b).shape[-1:])
    if bv.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), av.shape[:-1])
    out = av @ bv
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return tape._push("matmul", out, parents)


def _unary(name, x, fwd, dfn):
    xv = value_of(x)
    out = fwd(xv)
    if not isinstance(x, Var):
        return out
    return x.tape._push(name, out, [(x, lambda g: g * dfn(xv, out))])


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))


def exp(x):
    return _unary("exp", x, np.exp, lambda v, o: o)


def log(x):
    return _unary("log", x, np.log, lambda v, o: 1.0 / v)


def softplus(x):
    # logaddexp(0, x) stays finite for |x| up to the float range
    return _unary("softplus", x, lambda v: np.logaddexp(0.0, v), lambda v, o: expit(v))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda v, o: 1.0 - o * o)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return x.tape._push("sum", np.asarray(out, dtype=np.float64), [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape
    count = xv.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape) / count

    return x.tape._push("mean", np.asarray(out, dtype=np.float64), [(x, vjp)])


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(lo, hi)
            sl = tuple(sl)
            parents.append((x, lambda g, sl=sl: g[sl]))
    return tape._push("concat", out, parents)


def getitem(x, index):
    xv = value_of(x)
    out = np.array(xv[index], dtype=np.float64)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return full

    return x.tape._push("getitem", out, [(x, vjp)])


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    in_shape = xv.shape
    return x.tape._push("reshape", out, [(x, lambda g: g.reshape(in_shape))])


# ---------------------------------------------------------------- composites


def neg(x):
    return mul(x, -1.0)


def sub(a, b):
    return add(a, neg(b))


def square(x):
    return mul(x, x)


def reciprocal(x):
    """1/x for strictly positive x."""
    return exp(neg(log(x)))


def div(a, b):
    if not isinstance(b, Var):
        return mul(a, 1.0 / value_of(b))
    return mul(a, reciprocal(b))


def sqrt(x):
    return exp(mul(log(x), 0.5))


def log_sigmoid(x):
    return neg(softplus(neg(x)))


def sigmoid(x):
    return exp(log_sigmoid(x))


# ---------------------------------------------------------------- backward


def grad(tape: Tape, output: Var, params):
    """d(output)/d(param) for each param.

    ``params`` may be a mapping name -> Var or a sequence of Vars; the result
    has the same structure with ndarrays. Params that do not influence the
    output receive zeros.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ContractError("output must be a Var recorded on this tape")
    if output.size != 1:
        raise ContractError(f"output must be scalar, got shape {output.shape}")
    if isinstance(params, Mapping):
        names, plist = list(params.keys()), list(params.values())
    else:
        names, plist = None, list(params)
    for p in plist:
        if not isinstance(p, Var) or p.tape is not tape:
            raise ContractError("every param must be a Var on this tape")

    wanted = {p.idx for p in plist}
    found: dict[int, np.ndarray] = {}
    adj: dict[int, np.ndarray] = {output.idx: np.ones_like(output.value)}
    nodes = tape.nodes
    for i in range(output.idx, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        if i in wanted:
            found[i] = g
        node = nodes[i]
        for j, vjp in zip(node.inputs, node.vjps):
            gj = vjp(g)
            if j in adj:
                adj[j] = adj[j] + gj
            else:
                adj[j] = gj

    out = [found.get(p.idx, np.zeros_like(p.value)).reshape(p.shape) for p in plist]
    if names is None:
        return out
    return dict(zip(names, out))
