"""Dense float64 tensors with a recording tape for reverse- and forward-mode
differentiation.

Operations on :class:`Tensor` objects always compute eagerly with numpy.  When a
:class:`Tape` is active and at least one operand is tracked by it (a watched
leaf or the output of an earlier recorded operation), the operation is appended
to the tape together with its local adjoint (vjp) and tangent (jvp) rules.

Example
-------
>>> x = Tensor([3.0, 4.0])
>>> with Tape() as tape:
...     tape.watch(x)
...     loss = 0.5 * (x * x).sum()
>>> tape.gradient(loss, [x])[0]
array([3., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "record",
    "gradient",
    "jvp",
    "value",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "logsumexp",
    "concat",
    "diag",
    "solve_triangular",
    "floor_nonfinite",
]

_TAPES: list["Tape"] = []


class Tensor:
    """Immutable float64 array that can take part in recorded computations."""

    __slots__ = ("data",)
    __array_priority__ = 100.0
    __array_ufunc__ = None

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    """Underlying numpy array of a tensor, or the input as a float array."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("inputs", "output", "vjp", "jvp")

    def __init__(self, inputs, output, vjp, jvp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.jvp = jvp


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so the list is already topologically
    sorted.  The tape keeps references to every tracked tensor, which keeps the
    ``id`` based bookkeeping valid for the lifetime of the tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: list[Tensor] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("only Tensor leaves can be watched")
            if id(t) not in self._tracked:
                self._tracked[id(t)] = t
                self.parameters.append(t)
        return tensors[0] if len(tensors) == 1 else tensors

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, inputs, output, vjp, jvp):
        self._tracked[id(output)] = output
        self.nodes.append(_Node(inputs, output, vjp, jvp))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse sweep; returns one gradient array per entry of ``params``.

        Parameters the loss does not depend on receive zeros.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ValueError(f"gradient requires a scalar loss, got shape {shape}")
        grads: dict[int, np.ndarray] = {}
        if self.tracks(loss):
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.tracks(inp):
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return [np.array(grads.get(id(p), np.zeros_like(p.data))) for p in params]

    def forward_tangents(self, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Forward sweep propagating tangents from the seeded leaves."""
        tangents = dict(seeds)
        for node in self.nodes:
            ins = [tangents.get(id(i)) if isinstance(i, Tensor) else None for i in node.inputs]
            if all(t is None for t in ins):
                continue
            tangents[id(node.output)] = node.jvp(*ins)
        return tangents


def _active_tape(inputs) -> Tape | None:
    for tape in reversed(_TAPES):
        if any(tape.tracks(i) for i in inputs):
            return tape
    return None


def _make(out_value, inputs, vjp, jvp) -> Tensor:
    out = Tensor(out_value)
    tape = _active_tape(inputs)
    if tape is not None:
        tape._record(tuple(inputs), out, vjp, jvp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _gmul(g, factor):
    """``g * factor`` with exact zeros wherever ``g`` is zero, so that entries
    cut off downstream never turn into ``0 * inf`` NaNs."""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        prod = g * factor
    return np.where(g == 0, 0.0, prod)


def _recip(x):
    with np.errstate(divide="ignore"):
        return 1.0 / x


def _z(t, like):
    return np.zeros_like(like) if t is None else t


# elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        lambda ta, tb: np.broadcast_to(_z(ta, a.data) + _z(tb, b.data), out.shape).copy(),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        lambda ta, tb: np.broadcast_to(_z(ta, a.data) - _z(tb, b.data), out.shape).copy(),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    x, y = a.data, b.data
    out = x * y
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        lambda ta, tb: np.broadcast_to(_z(ta, x) * y + x * _z(tb, y), out.shape).copy(),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    x, y = a.data, b.data
    out = x / y
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(_gmul(g, _recip(y)), x.shape), _unbroadcast(_gmul(-g, out / y), y.shape)),
        lambda ta, tb: np.broadcast_to(_z(ta, x) / y - out * _z(tb, y) / y, out.shape).copy(),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), lambda t: -t)


def power(a, exponent) -> Tensor:
    """``a ** exponent`` for a constant scalar exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    a = as_tensor(a)
    k = float(exponent)
    x = a.data
    out = x**k
    dx = k * x ** (k - 1.0) if k != 0.0 else np.zeros_like(x)
    return _make(out, (a,), lambda g: (_gmul(g, dx),), lambda t: t * dx)


# elementwise unary ---------------------------------------------------------
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    d = 1.0 - out * out
    return _make(out, (a,), lambda g: (g * d,), lambda t: t * d)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (_gmul(g, out),), lambda t: t * out)


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (_gmul(g, _recip(x)),), lambda t: t / x)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (_gmul(g, 0.5 * _recip(out)),), lambda t: 0.5 * t / out)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), lambda t: t * sig)


def floor_nonfinite(a, fill: float) -> tuple[Tensor, int]:
    """Replace non-finite entries by ``fill``; those entries carry no gradient.

    Returns the new tensor and the number of replaced entries.
    """
    a = as_tensor(a)
    bad = ~np.isfinite(a.data)
    out = np.where(bad, fill, a.data)
    keep = (~bad).astype(np.float64)
    t = _make(out, (a,), lambda g: (g * keep,), lambda t: t * keep)
    return t, int(bad.sum())


# linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 1 or y.ndim < 1 or x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    out = x @ y

    def vjp(g):
        if y.ndim == 1:
            ga = np.multiply.outer(g, y) if x.ndim > 1 else g * y
            gb = x.T @ g if x.ndim == 2 else (x * g[..., None]).reshape(-1, y.shape[0]).sum(0)
            return ga, gb
        if x.ndim == 1:
            return y @ g, np.outer(x, g)
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _make(out, (a, b), vjp, lambda ta, tb: _z(ta, x) @ y + x @ _z(tb, y))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        return a
    sw = lambda v: np.swapaxes(v, -1, -2)  # noqa: E731
    return _make(sw(a.data), (a,), lambda g: (sw(g),), lambda t: sw(t))


def diag(v) -> Tensor:
    """Square matrix with the vector ``v`` on its diagonal."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ValueError(f"diag expects a vector, got shape {v.shape}")
    return _make(np.diag(v.data), (v,), lambda g: (np.diag(g).copy(),), lambda t: np.diag(t))


def solve_triangular(t, b, lower: bool, unit_diagonal: bool = False) -> Tensor:
    """Solve ``T X = B`` for triangular ``T`` (d x d) and ``B`` (d x k or d)."""
    t, b = as_tensor(t), as_tensor(b)
    T, B = t.data, b.data
    if T.ndim != 2 or T.shape[0] != T.shape[1] or B.shape[0] != T.shape[0]:
        raise ValueError(f"solve_triangular: incompatible shapes {T.shape} and {B.shape}")
    X = _solve_tri(T, B, lower=lower, unit_diagonal=unit_diagonal, check_finite=False)
    mask = np.tril(np.ones_like(T), -1 if unit_diagonal else 0)
    if not lower:
        mask = mask.T

    def vjp(g):
        gb = _solve_tri(T, g, trans="T", lower=lower, unit_diagonal=unit_diagonal, check_finite=False)
        gt = -np.outer(gb, X) if X.ndim == 1 else -gb @ X.T
        return gt * mask, gb

    def tangent(tt, tb):
        rhs = _z(tb, B)
        if tt is not None:
            rhs = rhs - (tt * mask) @ X
        return _solve_tri(T, rhs, lower=lower, unit_diagonal=unit_diagonal, check_finite=False)

    return _make(X, (t, b), vjp, tangent)


# reductions & shape ---------------------------------------------------------
def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp, lambda t: t.sum(axis=axis, keepdims=keepdims))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1) -> Tensor:
    """Max-shifted log-sum-exp along one axis."""
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s
    return _make(
        out,
        (a,),
        lambda g: (np.expand_dims(g, axis) * w,),
        lambda t: (t * w).sum(axis=axis),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), lambda t: t.reshape(shape))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp, lambda t: t[index])


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    def tangent(*ts):
        return np.concatenate([_z(t, p.data) for t, p in zip(ts, parts)], axis=axis)

    return _make(out, tuple(parts), vjp, tangent)


# front-end helpers ----------------------------------------------------------
def record(fn: Callable, *leaves) -> tuple[Tensor, Tape]:
    """Evaluate ``fn(*leaves)`` on a fresh tape with the leaves watched."""
    leaves = [as_tensor(x) for x in leaves]
    with Tape() as tape:
        tape.watch(*leaves)
        out = fn(*leaves)
    return out, tape


def gradient(fn: Callable, *leaves) -> list[np.ndarray]:
    """Gradient of the scalar ``fn(*leaves)`` with respect to every leaf."""
    leaves = [as_tensor(x) for x in leaves]
    out, tape = record(fn, *leaves)
    return tape.gradient(out, leaves)


def jvp(fn: Callable, x, v) -> Tensor:
    """Forward-mode directional derivative ``D_x fn [v]``."""
    x = as_tensor(x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError(f"jvp: tangent shape {v.shape} does not match point shape {x.shape}")
    out, tape = record(fn, x)
    if not tape.tracks(out):
        return Tensor(np.zeros_like(out.data))
    tangents = tape.forward_tangents({id(x): v})
    t = tangents.get(id(out))
    return Tensor(np.zeros_like(out.data) if t is None else t)
