"""Dense tensors with reverse-mode differentiation on an explicit tape.

Storage is a row-major numpy buffer (float32 or float64). Ops executed while
a Tape is active are recorded in execution order, which is already a
topological order; ``Tape.backward`` replays the record once in reverse.
Any op that produces NaN/Inf raises NumericsError immediately.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NumericsError, ShapeError, VocabError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _contig(arr) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d.
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in FLOAT_DTYPES:
        raise ShapeError(f"unsupported tensor dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """A dense numeric array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = _contig(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
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
        """The underlying buffer; treat as read-only."""
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        """Cast to a new leaf tensor (not recorded; mixed precision is out of scope)."""
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("tensor division supports scalar divisors only")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Per-forward-pass op record; owned by a single training step."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every recorded tensor reachable from ``loss``."""
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.entries:
            raise ContractError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self.entries):
            g = out.grad
            if g is None:
                continue
            grads = rule(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if gt.dtype != t.data.dtype:
                    gt = gt.astype(t.data.dtype)
                if t.grad is None:
                    t.grad = np.array(gt, copy=True)
                else:
                    t.grad += gt


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by op '{name}'")


def _result(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    data = _contig(data)
    _check_finite(name, data)
    recording = bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, recording)
    if recording:
        _TAPE_STACK[-1].entries.append((out, inputs, rule))
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ShapeError(f"mixed dtypes {x.dtype} vs {like.dtype}; cast explicitly")
        return x
    return Tensor._wrap(_contig(np.asarray(x, dtype=like.dtype)), False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    data = a.data + b.data

    def rule(g, a=a, b=b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", data, (a, b), rule)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _coerce(b, a)
    else:
        a = _coerce(a, b)
    data = a.data - b.data

    def rule(g, a=a, b=b):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", data, (a, b), rule)


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        c = float(b)
        data = a.data * c

        def srule(g, a=a, c=c):
            return (g * c,)

        return _result("mul", data, (a,), srule)
    if not isinstance(a, Tensor):
        a, b = b, a
        return mul(a, b)
    b = _coerce(b, a)
    data = a.data * b.data

    def rule(g, a=a, b=b):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", data, (a, b), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul operands must be tensors")
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype} vs {b.dtype}; cast explicitly")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def rule(g, a=a, b=b):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("matmul", data, (a, b), rule)


# ---------------------------------------------------------------------------
# shape ops (bitwise-exact round trips)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def rule(g, inv=inv):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _result("transpose", data, (a,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)

    def rule(g, s=a.shape):
        return (np.ascontiguousarray(g).reshape(s),)

    return _result("reshape", data, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise ShapeError(f"concat rank mismatch: {first.shape} vs {t.shape}")
        if t.dtype != first.dtype:
            raise ShapeError(f"concat dtype mismatch: {first.dtype} vs {t.dtype}")
        for ax in range(first.ndim):
            if ax != axis % first.ndim and t.shape[ax] != first.shape[ax]:
                raise ShapeError(f"concat shapes disagree off-axis: {first.shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def rule(g, sizes=sizes, axis=axis):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _result("concat", data, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g, a=a, axes=axes, keepdims=keepdims):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", data, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def rule(g, a=a, axes=axes, keepdims=keepdims, count=count):
        g = g / count
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _result("mean", data, (a,), rule)


# ---------------------------------------------------------------------------
# rowwise nonlinearities (delegate to kernels)


def _to_rows(arr: np.ndarray, axis: int):
    axis = axis % arr.ndim
    moved = arr if axis == arr.ndim - 1 else np.moveaxis(arr, axis, -1)
    shape = moved.shape
    return np.ascontiguousarray(moved).reshape(-1, shape[-1]), shape, axis


def _from_rows(rows: np.ndarray, shape, axis: int, ndim: int) -> np.ndarray:
    arr = rows.reshape(shape)
    if axis != ndim - 1:
        arr = np.ascontiguousarray(np.moveaxis(arr, -1, axis))
    return arr


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    x2, shape, ax = _to_rows(a.data, axis)
    y2 = kernels.softmax_rows(x2)
    data = _from_rows(y2, shape, ax, a.ndim)

    def rule(g, y2=y2, shape=shape, ax=ax, ndim=a.ndim):
        g2, _, _ = _to_rows(g, ax)
        gx2 = kernels.softmax_rows_grad(y2, g2)
        return (_from_rows(gx2, shape, ax, ndim),)

    return _result("softmax", data, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x2, shape, ax = _to_rows(a.data, axis)
    y2 = kernels.log_softmax_rows(x2)
    data = _from_rows(y2, shape, ax, a.ndim)

    def rule(g, y2=y2, shape=shape, ax=ax, ndim=a.ndim):
        g2, _, _ = _to_rows(g, ax)
        gx2 = kernels.log_softmax_rows_grad(y2, g2)
        return (_from_rows(gx2, shape, ax, ndim),)

    return _result("log_softmax", data, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    x2 = x.data.reshape(-1, n)
    out2, xhat, inv = kernels.layer_norm_rows(x2, gain.data, bias.data, eps)
    data = out2.reshape(x.shape)

    def rule(g, xhat=xhat, inv=inv, gain=gain, shape=x.shape, n=n):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        gx2, ggain, gbias = kernels.layer_norm_rows_grad(xhat, inv, gain.data, g2)
        return gx2.reshape(shape), ggain, gbias

    return _result("layer_norm", data, (x, gain, bias), rule)


def gelu(a: Tensor) -> Tensor:
    data = kernels.gelu(a.data)

    def rule(g, a=a):
        return (kernels.gelu_grad(a.data, g),)

    return _result("gelu", data, (a,), rule)


# ---------------------------------------------------------------------------
# indexing


def _row_gather(name: str, table: Tensor, ids: np.ndarray, err: Exception | None) -> Tensor:
    if ids.ndim != 1:
        raise ShapeError(f"{name} expects a 1-d index array, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise err
    data = table.data[ids]

    def rule(g, table=table, ids=ids):
        acc = np.zeros_like(table.data)
        kernels.scatter_add_rows(acc, ids, np.ascontiguousarray(g))
        return (acc,)

    return _result(name, data, (table,), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Select vocabulary rows; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = ids[(ids < 0) | (ids >= table.shape[0])] if ids.size else ids
    err = VocabError(
        f"token id {bad[0] if bad.size else '?'} out of range for vocabulary of size {table.shape[0]}"
    )
    return _row_gather("embedding_lookup", table, ids, err)


def take_rows(x: Tensor, indices) -> Tensor:
    ids = np.asarray(indices, dtype=np.int64)
    err = ContractError(f"row index out of range for shape {x.shape}")
    return _row_gather("take_rows", x, ids, err)


def take_pairs(x: Tensor, rows, cols) -> Tensor:
    """Gather x[rows[i], cols[i]] as a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("take_pairs expects matching 1-d index arrays")
    if rows.size and (
        rows.min() < 0 or rows.max() >= x.shape[0] or cols.min() < 0 or cols.max() >= x.shape[1]
    ):
        raise ContractError(f"pair index out of range for shape {x.shape}")
    data = x.data[rows, cols]

    def rule(g, x=x, rows=rows, cols=cols):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (rows, cols), g)
        return (acc,)

    return _result("take_pairs", data, (x,), rule)
