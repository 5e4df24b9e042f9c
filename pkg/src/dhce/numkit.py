"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every value is a ``rows x cols`` float64 matrix. Operations executed while a
:class:`Tape` is active are appended to it together with a closure computing
the local vector-Jacobian product; :func:`backward` replays the tape in
reverse. Outside a tape, operations are plain numpy calls.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

class _TapeStack(threading.local):
    def __init__(self):
        self.tapes: list = []


_stack = _TapeStack()


class ShapeError(ValueError):
    pass


class Tensor:
    """A 2-D float64 matrix. ``name`` is set on parameters only."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"only 2-D tensors are supported, got ndim={arr.ndim}")
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and only the innermost
    one records.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    tapes = _stack.tapes
    return tapes[-1] if tapes else None


def record_op(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of a custom operation.

    ``vjp(upstream)`` must return one gradient (or None) per input.
    """
    out = Tensor._wrap(value)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# --- binary ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return record_op(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar ``b`` scales without a graph node."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        return record_op(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data
    return record_op(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


# --- unary ops --------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(t: Tensor) -> Tensor:
    s = _sigmoid(t.data)
    return record_op(s, (t,), lambda g: (g * s * (1.0 - s),))


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return record_op(y, (t,), lambda g: (g * (1.0 - y * y),))


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(t.data)
    if not np.isfinite(y).all():
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(y))[0])
        raise FloatingPointError(f"exp overflow at index {idx}")
    return record_op(y, (t,), lambda g: (g * y,))


def log(t: Tensor) -> Tensor:
    x = t.data
    bad = x <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"log of non-positive entry {x[idx]!r} at index {idx}")
    return record_op(np.log(x), (t,), lambda g: (g / x,))


def negate(t: Tensor) -> Tensor:
    return record_op(-t.data, (t,), lambda g: (-g,))


UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "negate": negate}


def map_unary(t: Tensor, f: str) -> Tensor:
    try:
        fn = UNARY[f]
    except KeyError:
        raise ValueError(f"unknown unary function {f!r}; expected one of {sorted(UNARY)}") from None
    return fn(t)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    x = t.data
    inside = (x >= lo) & (x <= hi)
    return record_op(np.clip(x, lo, hi), (t,), lambda g: (g * inside,))


# --- reductions and structure ----------------------------------------------


def softmax_rows(t: Tensor) -> Tensor:
    if t.rows == 0 or t.cols == 0:
        raise ShapeError("softmax_rows: empty tensor")
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record_op(s, (t,), vjp)


def max_over_rows(t: Tensor) -> Tensor:
    """Columnwise max; the gradient goes to the first argmax row of each column."""
    if t.rows == 0 or t.cols == 0:
        raise ShapeError("max_over_rows: empty tensor")
    arg = np.argmax(t.data, axis=0)
    cols = np.arange(t.cols)
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        out[arg, cols] = g[0]
        return (out,)

    return record_op(t.data[arg, cols][None, :], (t,), vjp)


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return record_op(np.array([[t.data.sum()]]), (t,), lambda g: (np.full(shape, g[0, 0]),))


def transpose(t: Tensor) -> Tensor:
    return record_op(t.data.T.copy(), (t,), lambda g: (g.T,))


def take_rows(t: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows (repeats allowed); the gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= t.rows):
        bad = int(idx[(idx < 0) | (idx >= t.rows)][0])
        raise IndexError(f"row index {bad} out of range for {t.rows} rows")
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record_op(t.data[idx], (t,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.zeros((rows, cols)))


# --- differentiation --------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode adjoints of ``loss`` for every tensor in ``wrt``.

    Tensors that the loss does not depend on get a zero gradient. With
    ``wrt=None`` every tensor seen on the tape is returned.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    seen: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = adj.get(id(rec.out))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            seen[key] = inp
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    targets = seen.values() if wrt is None else wrt
    return {t: adj.get(id(t), np.zeros(t.shape)) for t in targets}


def _evaluate(f: Callable[[], Tensor]) -> np.ndarray:
    val = f().data
    if not np.isfinite(val).all():
        raise FloatingPointError("function value is not finite")
    return val


def _objective(out: Tensor) -> Tensor:
    return out if out.shape == (1, 1) else sum_all(out)


def gradient_errors(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Per-parameter max relative error between backward() and central differences.

    ``f`` may return a matrix of terms whose sum is the objective; the
    difference f(x+eps) - f(x-eps) is then formed term by term and summed
    with ``math.fsum``, which keeps cancellation noise near one ulp per term.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = _objective(f())
    if not math.isfinite(loss.item()):
        raise FloatingPointError(f"function value is not finite: {loss.item()}")
    analytic = backward(tape, loss, wrt=params)
    errors = []
    for p in params:
        worst = 0.0
        flat = p.data.reshape(-1)
        ga = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f)
            flat[i] = orig - eps
            fm = _evaluate(f)
            flat[i] = orig
            num = math.fsum((fp - fm).ravel()) / (2.0 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
        errors.append(worst)
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error of the tape gradient against central finite differences.

    ``f`` takes no arguments and reads the parameters it closes over; each
    parameter is perturbed in place and restored.
    """
    errs = gradient_errors(f, params, eps)
    return max(errs, default=0.0)


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {grads[name].shape}, expected {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
