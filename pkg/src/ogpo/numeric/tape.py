"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts plain ``np.ndarray``/float inputs or :class:`Var` nodes. With no
``Var`` among the inputs the op is a plain numpy call, so the same model code
serves both fast rollouts and differentiated losses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Var:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "name")
    __array_priority__ = 1000.0

    def __init__(self, value, tape: "Tape", parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.index = tape._push(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name})"

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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Tape:
    """Single-use record of primitive ops.

    Nodes are appended in creation order, which is a topological order, so the
    backward sweep is one reverse pass over the node list.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}
        self._watched: dict[int, Var] = {}
        self._used = False

    def _push(self, node: Var) -> int:
        if self._used:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value: Array) -> Var:
        if name in self.params:
            return self.params[name]
        v = Var(value, self, name=name)
        self.params[name] = v
        self._watched[id(value)] = v
        return v

    def watch(self, params: dict[str, Array]) -> dict[str, Var]:
        """Wrap a parameter dict as trainable leaves (idempotent per array)."""
        out = {}
        for name, value in params.items():
            v = self._watched.get(id(value))
            out[name] = v if v is not None and v.name == name else self.param(name, value)
        return out

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def backward(self, root: Var, seed: float = 1.0) -> dict[str, Array]:
        """Return d(root)/d(param) for every watched parameter.

        Parameters never reached from ``root`` get exact zeros.
        """
        if self._used:
            raise TapeError("backward() called twice; tapes are single-use")
        if not isinstance(root, Var) or root.tape is not self:
            raise TapeError("root is not a node of this tape")
        if len(self.nodes) <= len(self.params):
            raise TapeError("backward before forward: no ops recorded")
        if np.size(root.value) != 1:
            raise TapeError(f"loss root must be scalar, got shape {root.shape}")
        self._used = True
        grads: list = [None] * len(self.nodes)
        grads[root.index] = np.full(np.shape(root.value), float(seed))
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                pg = _unbroadcast(pg, np.shape(parent.value))
                cur = grads[parent.index]
                grads[parent.index] = pg if cur is None else cur + pg
        out = {}
        for name, v in self.params.items():
            g = grads[v.index]
            out[name] = np.zeros_like(v.value) if g is None else np.asarray(g, dtype=np.float64)
        return out


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _op(fn_value, parents: Sequence, backward: Callable):
    """Apply ``fn_value`` to raw values; record on the tape if any input is a Var."""
    tape = _tape_of(*parents)
    raw = [value(p) for p in parents]
    out = fn_value(*raw)
    if tape is None:
        return out
    return Var(out, tape, tuple(parents), lambda g: backward(g, out, *raw))


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    return _op(np.add, (a, b), lambda g, o, x, y: (g, g))


def sub(a, b):
    return _op(np.subtract, (a, b), lambda g, o, x, y: (g, -g))


def mul(a, b):
    return _op(np.multiply, (a, b), lambda g, o, x, y: (g * y, g * x))


def div(a, b):
    return _op(np.divide, (a, b), lambda g, o, x, y: (g / y, -g * x / (y * y)))


def neg(a):
    return _op(np.negative, (a,), lambda g, o, x: (-g,))


def power(a, p: float):
    return _op(lambda x: x**p, (a,), lambda g, o, x: (g * p * x ** (p - 1),))


def square(a):
    return _op(np.square, (a,), lambda g, o, x: (2.0 * g * x,))


def sqrt(a):
    return _op(np.sqrt, (a,), lambda g, o, x: (0.5 * g / o,))


def exp(a):
    return _op(np.exp, (a,), lambda g, o, x: (g * o,))


def log(a):
    return _op(np.log, (a,), lambda g, o, x: (g / x,))


def tanh(a):
    return _op(np.tanh, (a,), lambda g, o, x: (g * (1.0 - o * o),))


def relu(a):
    return _op(lambda x: np.maximum(x, 0.0), (a,), lambda g, o, x: (g * (x > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    def f(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))

    def b(g, o, x):
        t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _op(f, (a,), b)


def sigmoid(a):
    def f(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    return _op(f, (a,), lambda g, o, x: (g * o * (1.0 - o),))


def minimum(a, b):
    # ties route the gradient to the first argument
    return _op(
        np.minimum,
        (a, b),
        lambda g, o, x, y: (g * (x <= y), g * (x > y)),
    )


def maximum(a, b):
    return _op(
        np.maximum,
        (a, b),
        lambda g, o, x, y: (g * (x >= y), g * (x < y)),
    )


def clip(a, lo: float, hi: float):
    return _op(
        lambda x: np.clip(x, lo, hi),
        (a,),
        lambda g, o, x: (g * ((x >= lo) & (x <= hi)),),
    )


def where(cond, a, b):
    cond = np.asarray(value(cond), dtype=bool)
    return _op(
        lambda x, y: np.where(cond, x, y),
        (a, b),
        lambda g, o, x, y: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


# -- reductions and shape ops -------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    def b(g, o, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(x)),)

    return _op(lambda x: np.sum(x, axis=axis, keepdims=keepdims), (a,), b)


def mean(a, axis=None, keepdims=False):
    def b(g, o, x):
        n = np.size(x) // max(np.size(o), 1)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(x)) / n,)

    return _op(lambda x: np.mean(x, axis=axis, keepdims=keepdims), (a,), b)


def reshape(a, shape):
    return _op(lambda x: np.reshape(x, shape), (a,), lambda g, o, x: (np.reshape(g, np.shape(x)),))


def swapaxes(a, i, j):
    return _op(lambda x: np.swapaxes(x, i, j), (a,), lambda g, o, x: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    def b(g, o, x):
        out = np.zeros(np.shape(x))
        np.add.at(out, idx, g)
        return (out,)

    return _op(lambda x: x[idx], (a,), b)


def concat(xs: Sequence, axis: int = -1):
    """Concatenate; along the last axis leading dims broadcast first."""
    xs = list(xs)
    raw = [np.asarray(value(x), dtype=np.float64) for x in xs]
    if axis == -1 or axis == raw[0].ndim - 1:
        lead = np.broadcast_shapes(*(r.shape[:-1] for r in raw))
        raw = [np.broadcast_to(r, lead + r.shape[-1:]) for r in raw]
    out = np.concatenate(raw, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    splits = np.cumsum([r.shape[axis] for r in raw])[:-1]
    return Var(out, tape, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b):
    # constant operands (network inputs, frozen weights) get no gradient
    need_x, need_y = isinstance(a, Var), isinstance(b, Var)

    def back(g, o, x, y):
        gx = gy = None
        if need_x:
            gx = g @ np.swapaxes(y, -1, -2) if np.ndim(y) > 1 else np.outer(g, y)
        if need_y:
            if np.ndim(x) == 1:
                gy = np.outer(x, g)
            else:
                gy = np.swapaxes(x, -1, -2) @ g
                if gy.ndim > np.ndim(y):
                    gy = gy.sum(axis=tuple(range(gy.ndim - np.ndim(y))))
        return gx, gy

    return _op(np.matmul, (a, b), back)


def logsumexp(a, axis=-1):
    def f(x):
        m = np.max(x, axis=axis, keepdims=True)
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))

    def b(g, o, x):
        p = np.exp(x - np.expand_dims(o, axis))
        return (np.expand_dims(g, axis) * p,)

    return _op(f, (a,), b)


def stop_gradient(a):
    return value(a)


def check_finite(x, what: str = "value"):
    v = value(x)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite {what}")
    return x
