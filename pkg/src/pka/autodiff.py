"""Tape-based reverse-mode autodiff over numpy arrays.

Every primitive here is polymorphic: called on plain arrays it just computes
the numpy result, called with at least one ``Var`` it also records a node on
that Var's tape. Attention kernels are written once against these functions
and serve both the fast inference path and gradient checks.

Applying an arbitrary numpy ufunc/function to a ``Var`` raises
``UnsupportedOpError`` instead of silently dropping the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PRIMITIVES: dict[str, Callable] = {}


class UnsupportedOpError(TypeError):
    pass


class Var:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, node={self.index})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    _UFUNCS = {"add": "add", "subtract": "sub", "multiply": "mul",
               "true_divide": "div", "matmul": "matmul", "negative": "neg"}

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        name = self._UFUNCS.get(ufunc.__name__)
        if method != "__call__" or name is None or kwargs:
            raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__}.{method} is not a registered primitive")
        return PRIMITIVES[name](*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy function {func.__name__} is not a registered primitive")


@dataclass
class Node:
    op: str
    parents: tuple  # tape indices, None for constant inputs
    backward: Callable | None


class Tape:
    """Append-only record; a node's parents always have smaller indices."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> Var:
        self.nodes.append(Node("leaf", (), None))
        return Var(np.asarray(value), self, len(self.nodes) - 1)

    def record(self, op: str, value: np.ndarray, inputs: Sequence, backward: Callable) -> Var:
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        self.nodes.append(Node(op, parents, backward))
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, out: Var, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value) if seed is None else seed}
        for i in range(out.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if p is None or gp is None:
                    continue
                grads[p] = grads[p] + gp if p in grads else gp
        return grads

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(op: str, out: np.ndarray, inputs: Sequence, backward: Callable):
    tape = _tape_of(inputs)
    if tape is None:
        return out
    return tape.record(op, out, inputs, backward)


def register(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn
    return deco


def apply(name: str, *args, **kwargs):
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UnsupportedOpError(f"{name!r} is not a registered primitive") from None
    return fn(*args, **kwargs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


@register("add")
def add(a, b):
    sa, sb = _shape(a), _shape(b)
    return _emit("add", value(a) + value(b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@register("sub")
def sub(a, b):
    sa, sb = _shape(a), _shape(b)
    return _emit("sub", value(a) - value(b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@register("mul")
def mul(a, b):
    av, bv = value(a), value(b)
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


@register("div")
def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, np.shape(av)), _unbroadcast(-g * out / bv, np.shape(bv))))


@register("neg")
def neg(a):
    return _emit("neg", -value(a), (a,), lambda g: (-g,))


@register("exp")
def exp(a):
    out = np.exp(value(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


@register("log")
def log(a):
    av = value(a)
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


@register("sqrt")
def sqrt(a):
    out = np.sqrt(value(a))
    return _emit("sqrt", out, (a,), lambda g: (g / (2 * out),))


@register("tanh")
def tanh(a):
    out = np.tanh(value(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1 - out * out),))


@register("sigmoid")
def sigmoid(a):
    av = value(a)
    out = 1.0 / (1.0 + np.exp(-av))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


@register("matmul")
def matmul(a, b):
    av, bv = value(a), value(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {av.shape} x {bv.shape}")

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb
    return _emit("matmul", np.matmul(av, bv), (a, b), back)


@register("sum")
def sum(a, axis=None, keepdims=False):
    av = value(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)
    return _emit("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,), back)


@register("mean")
def mean(a, axis=None, keepdims=False):
    av = value(a)
    count = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)
    return _emit("mean", np.mean(av, axis=axis, keepdims=keepdims), (a,), back)


@register("reshape")
def reshape(a, shape):
    av = value(a)
    return _emit("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


@register("transpose")
def transpose(a, axes):
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(value(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    axes = list(range(np.ndim(value(a))))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


@register("getitem")
def getitem(a, key):
    av = value(a)

    def back(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)
    return _emit("getitem", av[key], (a,), back)


@register("take")
def take(a, idx, axis):
    """Gather ``idx`` along ``axis`` (sparse kernels' row/key gather)."""
    av = value(a)
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(av)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)
    return _emit("take", np.take(av, idx, axis=axis), (a,), back)


@register("scatter")
def scatter(a, idx, axis, size):
    """Inverse of ``take`` for unique ``idx``: zeros of length ``size`` on ``axis`` with ``a`` placed at ``idx``."""
    av = value(a)
    idx = np.asarray(idx)
    shape = list(av.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=av.dtype)
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(av, axis, 0)
    return _emit("scatter", out, (a,), lambda g: (np.take(g, idx, axis=axis),))


@register("concat")
def concat(xs, axis):
    vals = [value(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", np.concatenate(vals, axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


@register("stack")
def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    return _emit("stack", np.stack(vals, axis=axis), tuple(xs),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


@register("where")
def where(mask, a, fill):
    """``a`` where ``mask`` else constant ``fill``; ``mask`` is never differentiated."""
    mask = np.asarray(value(mask), dtype=bool)
    av = value(a)
    return _emit("where", np.where(mask, av, fill), (a,),
                 lambda g: (_unbroadcast(np.where(mask, g, 0), np.shape(av)),))


@register("softmax")
def softmax(a, axis=-1, mask=None):
    """Softmax with exact exclusion of keys where ``mask`` is False."""
    av = value(a)
    if mask is None:
        m = np.max(av, axis=axis, keepdims=True)
        e = np.exp(av - m)
    else:
        mask = np.asarray(value(mask), dtype=bool)
        m = np.max(np.where(mask, av, -np.inf), axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ValueError("softmax row has no permitted entry")
        e = np.where(mask, np.exp(np.where(mask, av - m, 0)), 0)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _emit("softmax", out, (a,),
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def stop_gradient(a) -> np.ndarray:
    """Detach: the returned plain array never appears on a tape."""
    return np.asarray(value(a))


def grad(f: Callable, params: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients of the scalar ``f(*params)`` with respect to each param."""
    return value_and_grad(f, params)[1]


def value_and_grad(f: Callable, params: Sequence[np.ndarray]):
    tape = Tape()
    leaves = [tape.leaf(np.asarray(p)) for p in params]
    out = f(*leaves)
    if not isinstance(out, Var):
        return float(np.asarray(out)), [np.zeros_like(np.asarray(p)) for p in params]
    if out.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {out.value.shape}")
    grads = tape.backward(out)
    result = [grads.get(v.index, np.zeros_like(v.value)) for v in leaves]
    return float(out.value), result


@dataclass
class FDReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    worst: tuple  # (param index, flat element index)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def fd_check(f: Callable, params: Sequence[np.ndarray], h: float = 1e-3,
             probes: int | None = None, rng=None, floor: float = 1e-2) -> FDReport:
    """Central-difference gradient check against ``grad``.

    Per element ``err = |a - n| / max(|a|, |n|, floor * max|n|)``; the floor
    keeps elements that are tiny relative to the largest gradient from being
    judged on truncation error alone. ``probes`` limits each param to that
    many randomly chosen elements (``rng`` required).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    analytic = grad(f, params)

    def fval(ps):
        return float(np.asarray(value(f(*ps))))

    numeric = []
    picks = []
    for pi, p in enumerate(params):
        flat_idx = np.arange(p.size)
        if probes is not None and p.size > probes:
            flat_idx = np.sort(rng.permutation(p.size)[:probes])
        est = np.empty(len(flat_idx))
        for k, j in enumerate(flat_idx):
            bumped = [q.copy() for q in params]
            bumped[pi].flat[j] += h
            up = fval(bumped)
            bumped[pi].flat[j] -= 2 * h
            down = fval(bumped)
            est[k] = (up - down) / (2 * h)
        numeric.append(est)
        picks.append(flat_idx)

    scale = max((np.max(np.abs(n)) for n in numeric if n.size), default=0.0)
    denom_floor = max(floor * scale, 1e-12)
    worst = (0.0, 0.0, (-1, -1))
    checked = 0
    for pi, (n, idx) in enumerate(zip(numeric, picks)):
        a = analytic[pi].reshape(-1)[idx]
        abs_err = np.abs(a - n)
        rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), denom_floor)
        checked += len(idx)
        if rel.size and rel.max() > worst[0]:
            k = int(rel.argmax())
            worst = (float(rel[k]), float(abs_err[k]), (pi, int(idx[k])))
        if abs_err.size:
            worst = (worst[0], max(worst[1], float(abs_err.max())), worst[2])
    return FDReport(max_rel_err=worst[0], max_abs_err=worst[1], checked=checked, worst=worst[2])
