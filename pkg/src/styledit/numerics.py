"""Dense float64 tensor ops with tape-based reverse-mode gradients.

Every op accepts either plain ``numpy`` arrays or :class:`Var` nodes. When no
input is a :class:`Var` the op returns a plain array, so inference code runs
the exact same arithmetic as the recorded path without any bookkeeping.

A tape exists only for the duration of one :func:`reverse_gradient` call.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class UnregisteredPrimitiveError(TypeError):
    pass


_state = threading.local()


def _current_tape() -> list | None:
    return getattr(_state, "tape", None)


class Var:
    """A recorded value on the active tape."""

    __slots__ = ("value", "parents", "backward", "__weakref__")

    def __init__(self, value: np.ndarray, parents: tuple = (), backward: Callable | None = None):
        self.value = value
        self.parents = parents
        self.backward = backward
        tape = _current_tape()
        if tape is None:
            raise UnregisteredPrimitiveError("Var created outside of a gradient tape")
        tape.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    # numpy must not silently unwrap a Var: any ufunc or array coercion is an
    # operation the tape cannot see.
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnregisteredPrimitiveError(f"numpy ufunc {ufunc.__name__!r} applied to a recorded value")

    def __array_function__(self, func, types, args, kwargs):
        raise UnregisteredPrimitiveError(f"numpy function {func.__name__!r} applied to a recorded value")

    def __array__(self, *args, **kwargs):
        raise UnregisteredPrimitiveError("recorded value coerced to a plain array")

    def __float__(self):
        raise UnregisteredPrimitiveError("recorded value coerced to float")

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


Tensor = np.ndarray | Var


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _as_array(x) -> np.ndarray | Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, np.ndarray):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return np.asarray(x, dtype=DTYPE)
    raise UnregisteredPrimitiveError(f"unsupported operand type {type(x).__name__}")


def _record(value: np.ndarray, parents: tuple, backward: Callable) -> np.ndarray | Var:
    if any(isinstance(p, Var) for p in parents):
        return Var(value, parents, backward)
    return value


def _unbroadcast_scalar(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.shape == g.shape:
        return g
    # 0-d scalar operand
    return np.asarray(g.sum(), dtype=DTYPE)


def _check_same(a, b, kind: str) -> None:
    sa, sb = value_of(a).shape, value_of(b).shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{kind}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b, "add")
    av, bv = value_of(a), value_of(b)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast_scalar(g, av), _unbroadcast_scalar(g, bv)))


def sub(a, b):
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b, "sub")
    av, bv = value_of(a), value_of(b)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast_scalar(g, av), _unbroadcast_scalar(-g, bv)))


def mul(a, b):
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b, "mul")
    av, bv = value_of(a), value_of(b)
    return _record(
        av * bv, (a, b), lambda g: (_unbroadcast_scalar(g * bv, av), _unbroadcast_scalar(g * av, bv))
    )


def neg(a):
    return _record(-value_of(a), (a,), lambda g: (-g,))


def scale(a, c: float):
    """Multiply by a Python constant."""
    c = float(c)
    return _record(value_of(a) * c, (a,), lambda g: (g * c,))


def add_const(a, c: float):
    c = float(c)
    return _record(value_of(a) + c, (a,), lambda g: (g,))


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def reciprocal(a):
    av = value_of(a)
    out = 1.0 / av
    return _record(out, (a,), lambda g: (-g * out * out,))


def square(a):
    av = value_of(a)
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def sigmoid(a):
    out = expit(value_of(a))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    av = value_of(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-av))
    return _record(av * s, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def relu(a):
    av = value_of(a)
    mask = av > 0
    return _record(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    """log(1 + e^a) without overflow."""
    av = value_of(a)
    return _record(np.logaddexp(0.0, av), (a,), lambda g: (g * expit(av),))


def clip(a, lo: float, hi: float):
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {"neg": neg, "exp": exp, "sqrt": sqrt, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None):
    """Apply a named entrywise op. Binary kinds require equal shapes."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        sa, sb = value_of(_as_array(a)).shape, value_of(_as_array(b)).shape
        if sa != sb:
            raise ShapeError(f"{kind}: shape mismatch {sa} vs {sb}")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](_as_array(a))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape: Sequence[int]):
    av = value_of(a)
    src = av.shape
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(value_of(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence, axis: int = 0):
    parts = [_as_array(p) for p in parts]
    vals = [value_of(p) for p in parts]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate(vals, axis=axis), tuple(parts), backward)


def getitem(a, idx):
    av = value_of(a)

    def backward(g):
        out = np.zeros_like(av)
        out[idx] = g
        return (out,)

    return _record(av[idx], (a,), backward)


def expand(a, shape: Sequence[int]):
    """Broadcast ``a`` to ``shape``; the only broadcasting primitive."""
    av = value_of(a)
    shape = tuple(shape)
    if av.ndim != len(shape):
        raise ShapeError(f"expand: rank mismatch {av.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(av.shape, shape)) if s != t)
    for i in axes:
        if av.shape[i] != 1:
            raise ShapeError(f"expand: cannot broadcast {av.shape} -> {shape}")
    return _record(np.broadcast_to(av, shape).copy(), (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def take_rows(table, ids: np.ndarray):
    """Embedding lookup: rows of a 2-D table selected by integer ids."""
    tv = value_of(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(tv)
        np.add.at(out, ids, g)
        return (out,)

    return _record(tv[ids], (table,), backward)


def sum_(a, axis=None, keepdims: bool = False):
    av = value_of(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, av.shape).copy(),)

    return _record(np.asarray(av.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (a,), backward)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 2-D or has the same batch axes."""
    a, b = _as_array(a), _as_array(b)
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if bv.ndim == 2 and av.ndim > 2:
            gb = np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim - 1))))
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, c, 3, 3, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i : i + h, j : j + w] += cols[:, :, i, j]
    return xp[:, :, 1:-1, 1:-1]


def conv3x3(x, kernels, bias=None):
    """3x3 convolution (cross-correlation) with one pixel of zero padding.

    ``x`` is C_in x H x W or N x C_in x H x W; ``kernels`` is C_out x C_in x 3 x 3.
    """
    xv, kv = value_of(x), value_of(kernels)
    single = xv.ndim == 3
    if single:
        xv = xv[None]
    if xv.ndim != 4 or kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: bad shapes x={value_of(x).shape} kernels={kv.shape}")
    n, c, h, w = xv.shape
    if kv.shape[1] != c:
        raise ShapeError(f"conv3x3: channel mismatch, input has {c}, kernels expect {kv.shape[1]}")
    co = kv.shape[0]
    if bias is not None and value_of(bias).shape != (co,):
        raise ShapeError(f"conv3x3: bias shape {value_of(bias).shape} != ({co},)")
    cols = _im2col(xv)
    wm = kv.reshape(co, c * 9)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += value_of(bias)[None, :, None]
    out = out.reshape(n, co, h, w)
    if single:
        out = out[0]

    def backward(g):
        g = g.reshape(n, co, h * w)
        gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kv.shape)
        gx = _col2im(np.matmul(wm.T, g), (n, c, h, w))
        if single:
            gx = gx[0]
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _record(out, parents, backward)


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamStore(Mapping[str, np.ndarray]):
    """Named float64 tensors, iterated in sorted-name order."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t: dict[str, np.ndarray] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._t[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def copy(self) -> ParamStore:
        return ParamStore({k: v.copy() for k, v in self._t.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: self._t[k].shape for k in self}

    def size(self) -> int:
        return sum(v.size for v in self._t.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self[k].ravel() for k in self]) if len(self) else np.zeros(0)

    def from_flat(self, vec: np.ndarray) -> ParamStore:
        out, pos = {}, 0
        for k in self:
            n = self[k].size
            out[k] = vec[pos : pos + n].reshape(self[k].shape)
            pos += n
        return ParamStore(out)

    def same_layout(self, other: ParamStore) -> bool:
        return self.shapes() == other.shapes()

    def equal(self, other: ParamStore) -> bool:
        return self.same_layout(other) and all(np.array_equal(self[k], other[k]) for k in self)


def reverse_gradient(f: Callable[[Mapping], object], at: Mapping[str, np.ndarray]) -> tuple[float, ParamStore]:
    """Evaluate scalar ``f`` at ``at`` and return ``(value, df/dp for every p)``.

    ``f`` receives a mapping name -> recorded value and must be built only from
    ops in this module.
    """
    if _current_tape() is not None:
        raise RuntimeError("nested reverse_gradient calls are not supported")
    tape: list[Var] = []
    _state.tape = tape
    try:
        leaves = {k: Var(np.asarray(at[k], dtype=DTYPE)) for k in at}
        out = f(leaves)
    finally:
        _state.tape = None
    names = list(leaves)
    zero = ParamStore({k: np.zeros_like(leaves[k].value) for k in names})
    if isinstance(out, np.ndarray) or isinstance(out, (float, int)):
        # f does not depend on any parameter
        return float(np.asarray(out)), zero
    if not isinstance(out, Var):
        raise UnregisteredPrimitiveError(f"f returned {type(out).__name__}, not a recorded scalar")
    if out.value.size != 1:
        raise ShapeError(f"f must be scalar-valued, got shape {out.value.shape}")

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None or node.backward is None:
            if node.backward is None and g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if not isinstance(parent, Var):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for k in names:
        g = grads.get(id(leaves[k]))
        result[k] = np.zeros_like(leaves[k].value) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaves[k].shape)
    return float(out.value.reshape(())), ParamStore(result)


def evaluate(f: Callable[[Mapping], object], at: Mapping[str, np.ndarray]) -> float:
    """Evaluate ``f`` on plain arrays, no tape."""
    out = f({k: np.asarray(at[k], dtype=DTYPE) for k in at})
    return float(np.asarray(out).reshape(()))


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    checked: int
    analytic: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    numeric: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(
    f: Callable[[Mapping], object],
    at: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    grad: Callable | None = None,
    coords: Iterable[tuple[str, int]] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences coordinate by coordinate.

    ``grad`` overrides the analytic gradient (used for negative controls).
    ``coords`` restricts the probe to selected (name, flat index) pairs.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    at = ParamStore(at)
    if grad is None:
        _, g = reverse_gradient(f, at)
    else:
        g = grad(at)
    if coords is None:
        coords = [(k, i) for k in at for i in range(at[k].size)]
    analytic, numeric, labels = [], [], []
    for name, i in coords:
        vals = []
        for sign in (1.0, -1.0):
            probe = {k: at[k].copy() for k in at}
            probe[name].reshape(-1)[i] += sign * h
            v = evaluate(f, probe)
            if not np.isfinite(v):
                raise FloatingPointError(f"f is not finite at probe {name}[{i}] {'+' if sign > 0 else '-'}h")
            vals.append(v)
        numeric.append((vals[0] - vals[1]) / (2 * h))
        analytic.append(float(np.asarray(g[name]).reshape(-1)[i]))
        labels.append((name, i))
    analytic_arr, numeric_arr = np.array(analytic), np.array(numeric)
    # coordinates below 1e-8 of the gradient scale are compared absolutely
    scale_ = max(float(np.abs(analytic_arr).max(initial=0.0)), float(np.abs(numeric_arr).max(initial=0.0)))
    err = relative_error(analytic_arr, numeric_arr, floor=max(1e-8 * scale_, 1e-12))
    worst = labels[int(np.argmax(err))] if len(err) else None
    max_err = float(err.max()) if len(err) else 0.0
    return GradCheckReport(max_err <= tol, max_err, worst, len(err), analytic_arr, numeric_arr)


# ---------------------------------------------------------------------------
# optimizers


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: ParamStore, max_norm: float | None) -> tuple[ParamStore, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    f = max_norm / norm
    return ParamStore({k: grads[k] * f for k in grads}), norm


class MomentumSGD:
    """Heavy-ball SGD: v <- mu * v + g; p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm

    def init_state(self, params: ParamStore) -> dict:
        return {"v": ParamStore({k: np.zeros_like(params[k]) for k in params}), "t": 0}

    def step(self, params: ParamStore, grads: ParamStore, state: dict) -> tuple[ParamStore, dict, float]:
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        v = ParamStore({k: self.momentum * state["v"][k] + grads[k] for k in params})
        new = ParamStore({k: params[k] - self.lr * v[k] for k in params})
        return new, {"v": v, "t": state["t"] + 1}, norm


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.lr, self.b1, self.b2, self.eps, self.clip_norm = lr, b1, b2, eps, clip_norm

    def init_state(self, params: ParamStore) -> dict:
        zeros = {k: np.zeros_like(params[k]) for k in params}
        return {"m": ParamStore(zeros), "v": ParamStore(zeros), "t": 0}

    def step(self, params: ParamStore, grads: ParamStore, state: dict) -> tuple[ParamStore, dict, float]:
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        t = state["t"] + 1
        m = ParamStore({k: self.b1 * state["m"][k] + (1 - self.b1) * grads[k] for k in params})
        v = ParamStore({k: self.b2 * state["v"][k] + (1 - self.b2) * grads[k] ** 2 for k in params})
        c1, c2 = 1 - self.b1**t, 1 - self.b2**t
        new = ParamStore({k: params[k] - self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps) for k in params})
        return new, {"m": m, "v": v, "t": t}, norm
