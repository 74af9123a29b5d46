"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every primitive computes its result with numpy and, when a :class:`Tape` is
active and any input requires a gradient, appends a record holding the local
adjoint rule. ``Tape.backward`` replays those records in exact reverse order.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DetachedGraph,
    EvenKernel,
    NonFiniteResult,
    NotScalarLoss,
    ShapeMismatch,
)

DTYPE = np.float64

# Finite-value checking after every primitive. Turning it off is only meant
# for profiling.
DEBUG = True

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "vitlab_active_tape", default=None
)


def _check_finite(data: np.ndarray, where: str) -> None:
    if DEBUG and not np.isfinite(data).all():
        raise NonFiniteResult(f"non-finite value produced by {where}")


class Tensor:
    """Row-major float64 array that can take part in a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise ShapeMismatch(f"extents must be positive, got {arr.shape}")
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered log of primitive applications.

    A tape is single-owner: one training step builds it, calls
    :meth:`backward` once and drops it.
    """

    records: list[_Record] = field(default_factory=list)
    visited: list[int] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs, vjp, name: str) -> None:
        output.requires_grad = True
        output._tape = self
        self.records.append(_Record(output, tuple(inputs), vjp, name))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise DetachedGraph("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        leaves: dict[int, Tensor] = {}
        self.visited = []
        for pos in range(len(self.records) - 1, -1, -1):
            rec = self.records[pos]
            self.visited.append(pos)
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves.setdefault(id(inp), inp)
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that produced ``loss``."""
    if loss._tape is None:
        raise DetachedGraph("loss is not attached to any tape")
    loss._tape.backward(loss)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, vjp, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic

def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{name}: {a.shape} vs {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _emit(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))  # x**3 goes through slow pow
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit(out, (a,), vjp, "gelu")


# reductions and layout

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _emit(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], dtype=DTYPE)
    basic = _is_basic(index)

    def vjp(g):
        z = np.zeros_like(a.data)
        if basic:
            z[index] += g  # basic indexing never repeats an element
        else:
            np.add.at(z, index, g)
        return (z,)

    return _emit(out, (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# linear algebra and layers

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # weight grad as one GEMM over the flattened leading axes
            k, n = b.shape
            return _unbroadcast(ga, a.shape), a.data.reshape(-1, k).T @ g.reshape(-1, n)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), vjp, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), vjp, "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)
    return _emit(out, (a,), lambda g: (g - prob * g.sum(axis=-1, keepdims=True),), "log_softmax_rows")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(logits)
    picked = getitem(logp, (np.arange(logits.shape[0]), labels))
    return picked.mean() * -1.0


def layernorm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm: tokens {t.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x = t.data
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (t, gamma, beta), vjp, "layernorm")


def conv1d_seq(t: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Depthwise convolution along the token axis of ``t[..., N, D]``.

    Channel ``d`` is correlated with ``kernels[d]`` (odd length K) under zero
    "same" padding, so the output has the input's shape.
    """
    if t.ndim < 2:
        raise ShapeMismatch(f"conv1d_seq expects [..., N, D], got {t.shape}")
    n, d = t.shape[-2:]
    if kernels.ndim != 2 or kernels.shape[0] != d or bias.shape != (d,):
        raise ShapeMismatch(f"conv1d_seq: tokens {t.shape}, kernels {kernels.shape}, bias {bias.shape}")
    k = kernels.shape[1]
    if k % 2 == 0:
        raise EvenKernel(f"kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    widths = [(0, 0)] * (t.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(t.data, widths)
    w = kernels.data
    out = np.broadcast_to(bias.data, t.shape).copy()
    for j in range(k):
        out += padded[..., j : j + n, :] * w[:, j]

    def vjp(g):
        gpad = np.zeros_like(padded)
        gw = np.empty_like(w)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gpad[..., j : j + n, :] += g * w[:, j]
            gw[:, j] = (g * padded[..., j : j + n, :]).sum(axis=lead)
        return gpad[..., pad : pad + n, :], gw, g.sum(axis=lead)

    return _emit(out, (t, kernels, bias), vjp, "conv1d_seq")


# random numbers

_TWO_POW_53 = float(2**53)


@dataclass
class RngStream:
    """Counter-based random stream (Philox) with Box-Muller Gaussians.

    Every draw consumes whole Philox counter blocks, so the pair
    ``(seed, counter)`` fully determines the next values.
    """

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> np.ndarray:
        blocks = -(-n // 4)
        bitgen = np.random.Philox(key=self.seed % 2**64, counter=self.counter % 2**64)
        raw = bitgen.random_raw(blocks * 4)[:n]
        self.counter += blocks
        return raw

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        if n == 0:
            return np.empty(0, dtype=DTYPE)
        return (self._raw(n) >> np.uint64(11)).astype(DTYPE) / _TWO_POW_53

    def normal(self, n: int) -> np.ndarray:
        pairs = -(-n // 2)
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=DTYPE)
        z[0::2] = radius * np.cos(2.0 * math.pi * u2)
        z[1::2] = radius * np.sin(2.0 * math.pi * u2)
        return z[:n]

    def derive(self, *keys: int) -> "RngStream":
        """Independent child stream keyed by ``(seed, *keys)``."""
        state = np.random.SeedSequence([self.seed % 2**64, *[int(k) for k in keys]])
        return RngStream(int(state.generate_state(1, np.uint64)[0]), 0)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.counter)


def gaussian(rng: RngStream, shape, sigma: float) -> Tensor:
    """Draw ``N(0, sigma**2)`` samples; ``sigma == 0`` yields exact zeros."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    shape = tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    z = rng.normal(n).reshape(shape)
    return Tensor._wrap(z * sigma if sigma > 0 else np.zeros(shape, dtype=DTYPE))


# finite differences

def gradcheck(
    f: Callable[[Tensor], Tensor],
    at: Tensor,
    h: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> float:
    """Largest relative gap between the tape gradient and central differences.

    Non-scalar outputs are reduced with a fixed random projection. The
    relative error of one entry is ``|a - n| / max(|a| + |n|, floor)``.
    """
    x0 = np.array(at.data, dtype=DTYPE)
    probe = None

    def scalar(out: Tensor) -> Tensor:
        nonlocal probe
        if out.data.size == 1:
            return out.sum()
        if probe is None:
            probe = RngStream(seed).normal(out.data.size).reshape(out.shape)
        return (out * Tensor._wrap(probe)).sum()

    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = scalar(f(x))
    tape.backward(loss)
    analytic = x.grad

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += h
        xm = x0.copy().reshape(-1)
        xm[i] -= h
        fp = scalar(f(Tensor._wrap(xp.reshape(x0.shape)))).item()
        fm = scalar(f(Tensor._wrap(xm.reshape(x0.shape)))).item()
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
