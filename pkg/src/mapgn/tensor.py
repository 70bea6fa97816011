"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Operations executed while a ``Tape`` is active are
recorded together with their backward rules; ``backward(loss)`` replays the
tape in reverse and accumulates gradients into ``Tensor.grad`` buffers.
Gradients accumulate additively, so a tensor used several times (weight
sharing, repeated lookups) receives the sum of all contributions.

Precision is float32 by default; wrap verification code in
``with precision("float64"):`` to create tensors with float64 headroom.
Operations never change the dtype of their inputs, so a model built under
float64 stays float64 regardless of the ambient default.

A tape and the tensors recorded on it belong to one thread (the active tape
is thread-local). Distinct tapes on distinct threads share nothing.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.dtype = np.float32
    return _state


def default_dtype() -> np.dtype:
    return np.dtype(_tls().dtype)


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _tls().dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype for newly created tensors."""
    tls = _tls()
    prev = tls.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        tls.dtype = prev


class Tensor:
    """Dense array with a value buffer and a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of the value; never receives gradient."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small conveniences; all arithmetic goes through the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, scale=float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; replayed once, in reverse, by backward()."""

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        tls = _tls()
        self._prev = tls.tape
        tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls().tape = self._prev

    def __len__(self) -> int:
        return len(self._ops)


def active_tape() -> Tape | None:
    return _tls().tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    tape = _tls().tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._ops.append((out, bwd))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad for every recorded tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if loss.tape is None:
        raise ValueError("backward: loss was not recorded on a tape")
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(loss.tape._ops):
        if out.grad is not None:
            bwd(out.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise add; also bias-add of a vector onto the rows of a matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)

        def bwd(g):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = Tensor(a.data + b.data)

        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not conform")
    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), bwd)


def affine(x, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """scale * x + shift with python-scalar constants."""
    x = _as_tensor(x)
    out = Tensor(scale * x.data + shift)

    def bwd(g):
        _accum(x, g * scale)

    return _record(out, (x,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = [_as_tensor(t) for t in tensors]
    base = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.shape[:-1] != base:
            raise ShapeError(f"concat: shapes {[t.data.shape for t in ts]} differ off the last axis")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    sizes = [t.data.shape[-1] for t in ts]

    def bwd(g):
        start = 0
        for t, size in zip(ts, sizes):
            _accum(t, g[..., start:start + size])
            start += size

    return _record(out, ts, bwd)


def narrow(x, start: int, size: int) -> Tensor:
    """Slice [start, start+size) of the last axis."""
    x = _as_tensor(x)
    if not (0 <= start and start + size <= x.data.shape[-1]):
        raise ShapeError(f"narrow: [{start}:{start + size}] out of range for shape {x.data.shape}")
    out = Tensor(x.data[..., start:start + size])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., start:start + size] = g
        _accum(x, full)

    return _record(out, (x,), bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    shape = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"stack: shapes {[t.data.shape for t in ts]} differ")
    out = Tensor(np.stack([t.data for t in ts], axis=0))

    def bwd(g):
        for i, t in enumerate(ts):
            _accum(t, g[i])

    return _record(out, ts, bwd)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view shape {x.data.shape} as {shape}")
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accum(x, g.reshape(old))

    return _record(out, (x,), bwd)


def transpose2d(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected a matrix, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy())

    def bwd(g):
        _accum(x, g.T)

    return _record(out, (x,), bwd)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _record(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype, copy=False)
    out = Tensor(y)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _record(out, (x,), bwd)


def softmax(x) -> Tensor:
    """Softmax along the last axis (rows sum to 1)."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), bwd)


def safe_log(x, floor: float = 0.0) -> Tensor:
    """log(x + floor); the floor guards probabilities that underflow to 0."""
    x = _as_tensor(x)
    shifted = x.data + floor
    out = Tensor(np.log(shifted))

    def bwd(g):
        _accum(x, g / shifted)

    return _record(out, (x,), bwd)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g):
        _accum(x, np.full_like(x.data, g))

    return _record(out, (x,), bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (width,)."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be a matrix, got shape {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    out = Tensor(table.data[idx])

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _record(out, (table,), bwd)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / keep
    out = Tensor(x.data * mask)

    def bwd(g):
        _accum(x, g * mask)

    return _record(out, (x,), bwd)


def tile_rows(x, times: int) -> Tensor:
    """Repeat a (B, F) matrix vertically into (times*B, F); block i holds a copy."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"tile_rows: expected a matrix, got shape {x.data.shape}")
    rows, cols = x.data.shape
    out = Tensor(np.tile(x.data, (times, 1)))

    def bwd(g):
        _accum(x, g.reshape(times, rows, cols).sum(axis=0))

    return _record(out, (x,), bwd)


def attend(alpha, states) -> Tensor:
    """Weighted sum of per-position states: (B, M) x (M, B, F) -> (B, F)."""
    alpha, states = _as_tensor(alpha), _as_tensor(states)
    if alpha.data.ndim != 2 or states.data.ndim != 3 or \
            alpha.data.shape != (states.data.shape[1], states.data.shape[0]):
        raise ShapeError(
            f"attend: weights {alpha.data.shape} do not conform with states {states.data.shape}")
    out = Tensor(np.einsum("bm,mbf->bf", alpha.data, states.data))

    def bwd(g):
        _accum(alpha, np.einsum("bf,mbf->bm", g, states.data))
        _accum(states, np.einsum("bm,bf->mbf", alpha.data, g))

    return _record(out, (alpha, states), bwd)


def copy_scatter(alpha, source_ids, vocab_size: int) -> Tensor:
    """Scatter attention weights onto vocabulary slots of the source tokens.

    out[b, t] = sum of alpha[b, m] over positions m with source_ids[b, m] == t.
    """
    alpha = _as_tensor(alpha)
    ids = np.asarray(source_ids)
    if alpha.data.ndim != 2 or ids.shape != alpha.data.shape:
        raise ShapeError(f"copy_scatter: weights {alpha.data.shape} vs ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"copy_scatter: source id out of range for vocab of {vocab_size}")
    batch = alpha.data.shape[0]
    rows = np.arange(batch)[:, None]
    dist = np.zeros((batch, vocab_size), dtype=alpha.data.dtype)
    np.add.at(dist, (np.broadcast_to(rows, ids.shape), ids), alpha.data)
    out = Tensor(dist)

    def bwd(g):
        _accum(alpha, g[np.broadcast_to(rows, ids.shape), ids])

    return _record(out, (alpha,), bwd)


def scale_rows(x, s) -> Tensor:
    """Multiply row b of a (B, F) matrix by scalar s[b]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.data.ndim != 2 or s.data.shape != (x.data.shape[0],):
        raise ShapeError(f"scale_rows: matrix {x.data.shape} vs scales {s.data.shape}")
    out = Tensor(x.data * s.data[:, None])

    def bwd(g):
        _accum(x, g * s.data[:, None])
        _accum(s, (g * x.data).sum(axis=1))

    return _record(out, (x, s), bwd)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be scalar-valued and deterministic. Run under float64 for
    meaningful tolerances. NaNs propagate into the returned value.
    """
    point.zero_grad()
    with Tape():
        loss = f(point)
        backward(loss)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(point).data)
        flat[i] = orig - eps
        lo = float(f(point).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
