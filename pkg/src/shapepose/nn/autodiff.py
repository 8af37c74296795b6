"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record onto the innermost active :class:`Tape`. Outside any tape (or
inside :func:`no_grad`) nothing is recorded and results carry no gradient.

    with Tape() as tape:
        loss = l1_loss(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64  # default; float32 arrays keep their precision
_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype in _FLOATS else arr.astype(DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; :meth:`backward` consumes it exactly once."""

    def __init__(self):
        self.nodes: list = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape reuse after backward() is not allowed")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                leaves[k] = t
        for k, t in leaves.items():
            if k in grads:
                g = grads[k]
                t.grad = g if t.grad is None else t.grad + g
        self.nodes = []


@contextmanager
def no_grad():
    s = _stack()
    s.append(None)
    try:
        yield
    finally:
        s.pop()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no tape to differentiate; run the forward pass inside `with Tape()`")
    tape.backward(loss)


def _result(data, inputs: tuple, backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    if np.isscalar(b):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """(..., K) @ (K, M) -> (..., M); leading dims of ``a`` are batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts),
                   lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_(x, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    x = as_tensor(x)
    shape = x.shape
    try:
        out = x.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] += g
        return (full,)

    return _result(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def leaky_relu(x, negative_slope: float = 0.02) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, negative_slope).astype(x.data.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.mean(axis=axis)
    n = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _result(out, (x,), bw)


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), bw)


def l1_loss(a, b) -> Tensor:
    """Sum of absolute differences; the subgradient at zero is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    s = np.sign(diff)
    return _result(np.abs(diff).sum(), (a, b), lambda g: (g * s, -g * s))


class RowGather:
    """Precomputed gather of rows by an (M, L) index table; -1 marks padding (zeros)."""

    def __init__(self, index: np.ndarray, num_rows: int):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 2:
            raise ShapeError(f"gather index must be 2-D, got {index.shape}")
        if index.size and (index.max() >= num_rows or index.min() < -1):
            raise ShapeError(f"gather index out of range for {num_rows} rows")
        self.index = index
        self.num_rows = num_rows
        m, length = index.shape
        flat = index.ravel()
        keep = flat >= 0
        self.padded = np.where(index < 0, num_rows, index)
        self.scatter = sp.csr_matrix(
            (np.ones(int(keep.sum()), dtype=DTYPE), (flat[keep], np.nonzero(keep)[0])),
            shape=(num_rows, m * length))
        self._cast = {np.dtype(DTYPE): self.scatter}

    @property
    def shape(self) -> tuple:
        return self.index.shape

    def scatter_as(self, dtype) -> sp.csr_matrix:
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = self.scatter.astype(dtype)
        return self._cast[dtype]


def gather_rows(x, gather: RowGather) -> Tensor:
    """(B, N, C) or (N, C) -> (B, M, L*C): per output row, the L gathered input rows concatenated."""
    x = as_tensor(x)
    if not isinstance(gather, RowGather):
        gather = RowGather(gather, x.shape[-2])
    if x.ndim not in (2, 3) or x.shape[-2] != gather.num_rows:
        raise ShapeError(f"gather_rows: input {x.shape} does not have {gather.num_rows} rows")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, n, c = xd.shape
    m, length = gather.shape
    padded = np.concatenate([xd, np.zeros((b, 1, c), dtype=xd.dtype)], axis=1)
    out = np.take(padded, gather.padded, axis=1).reshape(b, m, length * c)
    if squeeze:
        out = out[0]

    def bw(g):
        gg = g.reshape(b, m * length, c).transpose(1, 0, 2).reshape(m * length, b * c)
        gx = (gather.scatter_as(gg.dtype) @ gg).reshape(n, b, c).transpose(1, 0, 2)
        return (gx[0] if squeeze else gx,)

    return _result(out, (x,), bw)


class SparseOperator:
    """A constant sparse matrix with its transpose prepared for the backward pass."""

    def __init__(self, M: sp.spmatrix):
        self.M = sp.csr_matrix(M, dtype=DTYPE)
        self.Mt = self.M.T.tocsr()
        self._cast = {np.dtype(DTYPE): (self.M, self.Mt)}

    @property
    def shape(self) -> tuple:
        return self.M.shape

    def as_dtype(self, dtype) -> tuple:
        """(M, M^T) in the given precision."""
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = (self.M.astype(dtype), self.Mt.astype(dtype))
        return self._cast[dtype]


def sparse_matmul(op, x) -> Tensor:
    """Constant sparse operator applied along the vertex axis of (N, C) or (B, N, C)."""
    x = as_tensor(x)
    if not isinstance(op, SparseOperator):
        op = SparseOperator(op)
    M, Mt = op.as_dtype(x.data.dtype)
    if x.ndim not in (2, 3) or x.shape[-2] != M.shape[1]:
        raise ShapeError(f"sparse_matmul: operator {M.shape} vs input {x.shape}")

    def apply(A, d):
        if d.ndim == 2:
            return A @ d
        b, n, c = d.shape
        return (A @ d.transpose(1, 0, 2).reshape(n, b * c)).reshape(A.shape[0], b, c).transpose(1, 0, 2)

    return _result(apply(M, x.data), (x,), lambda g: (apply(Mt, g),))


def numerical_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
