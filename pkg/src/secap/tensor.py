"""Dense tensors with reverse-mode automatic differentiation.

Data lives in contiguous row-major numpy buffers (float32 by default,
float64 for gradient checking). Every differentiable op appends one entry
to a process-global tape; backward() walks the tape once in reverse and
consumes it. The tape is rebuilt on every forward pass; there are no
retained graphs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from . import runtime
from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Parameter", "Tape", "tape", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "swapaxes",
    "reshape", "concat", "narrow", "split", "tsum", "tmean", "softmax_lastdim",
    "log_softmax_lastdim", "layer_norm", "gelu", "texp", "tlog", "tsqrt",
    "tabs", "clamp_min", "softplus", "take_pairs",
]

DEFAULT_DTYPE = np.float32


class TapeEntry:
    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs          # tuple of Tensor
        self.output = output          # Tensor
        self.backward_rule = backward_rule  # grad_out ndarray -> per-input grads


class Tape:
    """Ordered record of differentiable ops; consumed by backward()."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.recording = True

    def append(self, entry: TapeEntry) -> None:
        if self.recording:
            self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()


_TAPE = Tape()


def tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, numeric probes)."""
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = prev


class Tensor:
    """n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)):
            # numpy float arrays keep their precision; everything else lands in f32
            arr = arr.astype(DEFAULT_DTYPE)
        # own the buffer: callers mutating their array must not alias tensor state
        self.data = np.array(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying buffer (no copy); treat as read-only."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars become constant tensors of matching dtype
    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor. Names are unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data, dtype=None):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise DimensionError(
                f"parameter {self.name}: cannot assign shape {value.shape} over {self.tensor.data.shape}")
        # copy so read-only sources (checkpoint views) stay probe-safe
        self.tensor.data = np.array(value.astype(self.tensor.data.dtype, copy=False), order="C")

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _post(arr: np.ndarray) -> np.ndarray:
    if runtime.debug_checks_enabled() and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by a forward op")
    return arr


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(_post(data))
    out.grad = None
    out.requires_grad = _TAPE.recording and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.append(TapeEntry(tuple(inputs), out, backward_rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _broadcast_binary(a: Tensor, b: Tensor, fwd, op_name: str):
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{op_name}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return data


def add(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_binary(a, b, np.add, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_binary(a, b, np.subtract, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_binary(a, b, np.multiply, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_binary(a, b, np.divide, "div")

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from exc

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(i != axis and t.shape[i] != ref[i] for i in range(ndim)):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(data, tuple(tensors), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis; inverse of concat."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"narrow axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}, {start + length}) exceeds size {a.shape[axis]} on axis {axis}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), rule)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis % a.ndim]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to axis size {a.shape[axis]}")
    out, offset = [], 0
    for s in sizes:
        out.append(narrow(a, axis, offset, s))
        offset += s
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / count, dtype=a.data.dtype)))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_lastdim(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), rule)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-dim slice to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv_std = div(_coerce(1.0, x), tsqrt(add(var, _coerce(eps, x))))
    return add(mul(mul(xc, inv_std), gamma), beta)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error formulation x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    data = x * phi_cdf

    def rule(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (phi_cdf + x * pdf),)

    return _make(data, (a,), rule)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    # gradient is zero on the clamped region, including the boundary
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed stably for large |x|."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def rule(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return (g * sig.astype(x.dtype),)

    return _make(data, (a,), rule)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector; indices are constants."""
    if a.ndim != 2:
        raise DimensionError(f"take_pairs needs a matrix, got shape {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(a.data[rows, cols].copy(), (a,), rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Consumes the tape: a second call without newly recorded ops raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _TAPE.entries:
        raise ContractError("tape is empty: already consumed or nothing was recorded")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    entries = _TAPE.entries
    for entry in reversed(entries):
        g_out = acc.get(id(entry.output))
        if g_out is None:
            continue  # not reachable from the loss
        grads = entry.backward_rule(g_out)
        for inp, g in zip(entry.inputs, grads):
            if g is None:
                continue
            key = id(inp)
            if key in acc:
                acc[key] = acc[key] + g
            else:
                acc[key] = g
                holders[key] = inp

    for key, tensor_ in holders.items():
        if tensor_.requires_grad:
            g = acc[key].astype(tensor_.data.dtype, copy=False)
            tensor_.grad = g if tensor_.grad is None else tensor_.grad + g

    _TAPE.clear()
