"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block). Outside a tape the same functions compute plain forward
values, which is what inference paths use.

    >>> w = Tensor.param([1.0, -2.0])
    >>> with Tape() as tape:
    ...     loss = total(mul(w, w))
    >>> backward(tape, loss)
    >>> w.grad
    array([ 2., -4.])
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "ConfigError",
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "power",
    "elementwise",
    "add_row",
    "tile_prefix",
    "reshape",
    "total",
    "mean",
    "pick",
    "log_softmax",
    "softmax",
    "detach",
    "backward",
    "clip_grad_norm",
    "sgd_step",
    "Adamax",
    "glorot_uniform",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite or out-of-domain value reached an operation."""


class ConfigError(ValueError):
    """Invalid hyper-parameter or configuration value."""


class Tensor:
    """Dense float64 array with an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @classmethod
    def param(cls, data, name: str | None = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64, copy=True), name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("looseqa_tape", default=None)


class Tape:
    """Ordered record of operations for one forward pass.

    ``backward`` consumes the tape: a second call raises ``RuntimeError``
    rather than silently double-accumulating gradients.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], Sequence]]] = []
        self._ids: set[int] = set()
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); start a new Tape")
        self.nodes.append((out, inputs, vjp))
        self._ids.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError("operation produced non-finite values")
    out = Tensor(value)
    tape = _ACTIVE.get()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. A single-element ``b`` broadcasts over ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if b.size == 1 and a.size != 1:
        s = B.reshape(())
        return _emit(A * s, (a, b), lambda g: (g * s, np.reshape(np.sum(g * A), B.shape)))
    _same_shape(a, b, "mul")
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    if not math.isfinite(factor):
        raise NumericError(f"scale: factor {factor} is not finite")
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _emit(y, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def power(a: Tensor, k: float) -> Tensor:
    """Elementwise ``a ** k`` for a non-negative base."""
    a = _as_tensor(a)
    k = float(k)
    x = a.data
    if np.any(x < 0):
        raise NumericError("power: negative base")
    return _emit(x**k, (a,), lambda g: (g * k * x ** (k - 1.0) if k != 1.0 else g,))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus, "exp": exp, "log": log}


def elementwise(op: str, *args):
    """Dispatch by name: ``relu``, ``tanh``, ``sigmoid``, ``add``, ``scale`` and friends."""
    if op in _UNARY:
        (a,) = args
        return _UNARY[op](a)
    if op == "add":
        return add(*args)
    if op == "sub":
        return sub(*args)
    if op == "mul":
        return mul(*args)
    if op == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    a, row = _as_tensor(a), _as_tensor(row)
    if a.data.ndim != 2 or row.shape != (a.shape[1],):
        raise DimensionError(f"add_row: cannot broadcast {row.shape} over {a.shape}")
    return _emit(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0)))


def tile_prefix(v: Tensor, rows: int, length: int) -> Tensor:
    """Stack ``rows`` copies of ``v[:length]`` into a (rows, length) matrix."""
    v = _as_tensor(v)
    if v.data.ndim != 1 or length > v.shape[0]:
        raise DimensionError(f"tile_prefix: cannot take {length} entries of {v.shape}")
    n = v.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[:length] = g.sum(axis=0)
        return (out,)

    return _emit(np.tile(v.data[:length], (rows, 1)), (v,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return _emit(y, (a,), lambda g: (g.reshape(old),))


def total(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shp = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shp, float(g)),))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shp, n = a.shape, a.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shp, float(g) / n),))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]``."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: index shape {idx.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    shp = a.shape

    def vjp(g):
        out = np.zeros(shp)
        out[rows, idx] = g
        return (out,)

    return _emit(a.data[rows, idx], (a,), vjp)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    z = _as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"log_softmax: need (batch, classes>=2), got {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax: non-finite input")
    y = _log_softmax(z.data)
    p = np.exp(y)
    return _emit(y, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(z) -> np.ndarray:
    """Plain row-wise softmax on values; not recorded."""
    x = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return np.exp(_log_softmax(x))


def detach(a: Tensor) -> Tensor:
    """Copy of the values with no path back to ``a``."""
    return Tensor(np.array(_as_tensor(a).data, copy=True))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on ``tape``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed; re-run the forward pass")
    if loss not in tape:
        raise ValueError("backward: loss was not produced on this tape")
    tape.consumed = True
    loss.grad = loss.grad + np.ones_like(loss.data)
    for out, inputs, vjp in reversed(tape.nodes):
        if not out.grad.any():
            continue
        for inp, g in zip(inputs, vjp(out.grad)):
            inp.grad = inp.grad + g
    for out, inputs, _ in tape.nodes:
        for inp in inputs:
            if not np.all(np.isfinite(inp.grad)):
                raise NumericError("backward: non-finite gradient")


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


def sgd_step(params: Iterable[Tensor], lr: float, max_grad_norm: float) -> float:
    """Clip, take one plain SGD step, zero the gradients. Returns the pre-clip norm."""
    if not lr > 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if not max_grad_norm > 0:
        raise ConfigError(f"max_grad_norm must be positive, got {max_grad_norm}")
    params = list(params)
    norm = clip_grad_norm(params, max_grad_norm)
    for p in params:
        p.data = p.data - lr * p.grad
        p.zero_grad()
    return norm


class Adamax:
    """Adamax with gradient clipping; an opt-in alternative to :func:`sgd_step`."""

    def __init__(self, params: Iterable[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, max_grad_norm: float) -> float:
        if not lr > 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        norm = clip_grad_norm(self.params, max_grad_norm)
        self.t += 1
        step = lr / (1.0 - self.beta1**self.t)
        for p, m, u in zip(self.params, self.m, self.u):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            np.maximum(self.beta2 * u, np.abs(p.grad), out=u)
            p.data = p.data - step * m / (u + self.eps)
            p.zero_grad()
        return norm


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))
