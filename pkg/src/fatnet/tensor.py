"""Dense NCHW tensors and a reverse-mode tape.

Tensors wrap an immutable, C-contiguous numpy buffer of float32 (inference)
or float64 (gradient checking). Every primitive below evaluates eagerly and,
when a :class:`Tape` is active, records its inputs, its output and a local
adjoint rule. :func:`grad` then walks the records once, in reverse.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)
_DTYPES = (FLOAT32, FLOAT64)

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """Immutable dense array with a fixed float precision."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data: Any, dtype=FLOAT32):
        dtype = np.dtype(dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # internal: adopt a freshly computed array without copying
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
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

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def astype(self, dtype) -> Tensor:
        if np.dtype(dtype) == self.dtype:
            return self
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.astype(dtype)
    return Tensor(x, dtype=FLOAT32 if dtype is None else dtype)


def _result_dtype(*ts: Tensor) -> np.dtype:
    return FLOAT64 if any(t.dtype == FLOAT64 for t in ts) else FLOAT32


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of primitive evaluations.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are appended in execution order, which is a topological order.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> Tape:
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[Tape] = []
# op name -> multiplier applied to that op's adjoints; a gradcheck negative control
_ADJOINT_FAULTS: dict[str, float] = {}


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward: Backward) -> Tensor:
    """Append a primitive to the active tape (if any) and return ``output``."""
    if _ACTIVE:
        fault = _ADJOINT_FAULTS.get(op)
        if fault is not None:
            inner = backward

            def backward(g, _inner=inner, _f=fault):
                return [None if gi is None else gi * _f for gi in _inner(g)]

        _ACTIVE[-1].records.append(Record(op, tuple(inputs), output, backward))
    return output


def grad(tape: Tape, output: Tensor, wrt: Iterable[Tensor] | Mapping[Any, Tensor]):
    """Gradients of a scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be an iterable of tensors (result keyed by tensor) or a
    mapping (result keyed the same way). Tensors that were recorded but do
    not influence ``output`` get zero gradients.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}; reduce with sum()")
    if isinstance(wrt, Mapping):
        keyed = dict(wrt)
    else:
        keyed = {t: t for t in wrt}

    seen: set[int] = set()
    for rec in tape.records:
        seen.add(id(rec.output))
        seen.update(id(t) for t in rec.inputs)
    if id(output) not in seen:
        raise ValueError("output was not produced on this tape")
    for key, t in keyed.items():
        if id(t) not in seen:
            raise ValueError(f"tensor {key!r} does not appear on the tape")

    adj: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=output.dtype)}
    for rec in reversed(tape.records):
        g = adj.get(id(rec.output))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            k = id(inp)
            if k in adj:
                adj[k] = adj[k] + gi
            else:
                adj[k] = np.asarray(gi, dtype=inp.dtype)

    out = {}
    for key, t in keyed.items():
        g = adj.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        out[key] = Tensor._wrap(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _channel_view(b: np.ndarray, ndim: int) -> np.ndarray:
    return b.reshape((1, -1) + (1,) * (ndim - 2))


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[1]:
        return "channel"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only per-channel broadcast allowed)")


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    bd = b.data if kind == "same" else _channel_view(b.data, a.ndim)
    out = Tensor._wrap((a.data + bd).astype(_result_dtype(a, b), copy=False))

    def backward(g):
        return g, (g if kind == "same" else _reduce_channel(g))

    return record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    bd = b.data if kind == "same" else _channel_view(b.data, a.ndim)
    out = Tensor._wrap((a.data * bd).astype(_result_dtype(a, b), copy=False))

    def backward(g):
        ga = g * bd
        gb = g * a.data
        return ga, (gb if kind == "same" else _reduce_channel(gb))

    return record("mul", (a, b), out, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = Tensor._wrap(a.data * s)
    return record("scale", (a,), out, lambda g: (g * s,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|, exact 0.5 at 0
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor._wrap(y)
    return record("sigmoid", (a,), out, lambda g: (g * y * (1 - y),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    out = Tensor._wrap(x * s)
    return record("silu", (a,), out, lambda g: (g * (s * (1 + x * (1 - s))),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor._wrap(np.maximum(x, 0))
    return record("relu", (a,), out, lambda g: (g * (x > 0),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = Tensor._wrap(half * x * (1 + t))

    def backward(g):
        du = c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * du),)

    return record("gelu", (a,), out, backward)


_UNARY = {"sigmoid": sigmoid, "silu": silu, "relu": relu, "gelu": gelu}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted({**_UNARY, **_BINARY})}")


# --------------------------------------------------------------------------
# linear algebra, reductions, layout
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    dt = _result_dtype(a, b)
    ad, bd = a.data.astype(dt, copy=False), b.data.astype(dt, copy=False)
    out = Tensor._wrap(np.matmul(ad, bd))

    def backward(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return record("matmul", (a, b), out, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (a,), out, backward)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size or any(s < 1 for s in shape):
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor._wrap(a.data.reshape(shape))
    src = a.shape
    return record("reshape", (a,), out, lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    out = Tensor._wrap(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return record("permute", (a,), out, lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = list(ts)
    axis = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != axis
        ):
            raise ShapeError(f"cannot concatenate {ts[0].shape} and {t.shape} on axis {axis}")
    dt = _result_dtype(*ts)
    out = Tensor._wrap(np.concatenate([t.data.astype(dt, copy=False) for t in ts], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return record("concat", ts, out, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor._wrap(a.data[idx])

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record("slice", (a,), out, backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(), dtype=a.dtype).reshape(()))
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor._wrap(np.asarray(a.data.mean(), dtype=a.dtype).reshape(()))
    return record("mean", (a,), out, lambda g: (np.broadcast_to(g / n, a.shape).copy(),))
