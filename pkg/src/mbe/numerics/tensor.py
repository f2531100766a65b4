"""Dense float64 tensors with a reverse-mode tape.

Ops execute eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the op also records an adjoint rule.
Without an active tape nothing is recorded, so inference pays only for the
numpy work.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records ops executed inside ``with Tape() as tape:``.

    Nodes are appended in execution order, which is a topological order of
    the op graph, so :meth:`gradient` walks the list backwards once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, parents, backward))

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _check(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite value in output")


def _emit(name: str, data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    _check(name, data)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a weight stored as (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    X, W = x.data, w.data
    return _emit("linear", X @ W.T, (x, w), lambda g: (g @ W, g.T @ X))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias added to every row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit("elementwise_mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def scale_rows(x: Tensor, w: np.ndarray) -> Tensor:
    """Multiply row ``i`` of ``x`` by the constant ``w[i]``."""
    w = np.asarray(w, dtype=np.float64)
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {w.shape}")
    col = w[:, None]
    return _emit("scale_rows", x.data * col, (x,), lambda g: (g * col,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _emit("relu", np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis; masked-out entries get probability 0."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"softmax: expected 1-D or 2-D input, got {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {z.shape}")
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), back)


def log_softmax_pick(x: Tensor, mask: np.ndarray, index: np.ndarray) -> Tensor:
    """``log softmax(x)[b, index[b]]`` per row, restricted to ``mask``."""
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_pick: expected 2-D input, got {x.shape}")
    mask = np.asarray(mask, dtype=bool)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if not mask[rows, index].all():
        raise ValueError("log_softmax_pick: picked a masked entry")
    z = np.where(mask, x.data, -np.inf)
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    out = (z[rows, index] - m[:, 0]) - np.log(s[:, 0])

    def back(g):
        gx = -p * g[:, None]
        gx[rows, index] += g
        return (gx,)

    return _emit("log_softmax_pick", out, (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in xs]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tuple(xs), back)


def stack(xs: Sequence[Tensor]) -> Tensor:
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in xs], axis=0)
    return _emit("stack", out, tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for shape {x.shape}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice_cols", x.data[:, start:stop], (x,), back)


def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.ndim != 1:
        raise ShapeError(f"gather_rows: expected 2-D table and 1-D index, got {x.shape}, {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    n = x.shape[0]

    def back(g):
        # scatter-add through a one-hot sparse matrix; much faster than np.add.at
        m = index.size
        onehot = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
        return (np.asarray(onehot @ g),)

    return _emit("gather_rows", x.data[index], (x,), back)


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant (dense or scipy.sparse) matrix times ``x``."""
    if x.data.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {x.shape}")
    out = np.asarray(matrix @ x.data)
    mt = matrix.T
    return _emit("spmm", out, (x,), lambda g: (np.asarray(mt @ g),))


def sum_rows(x: Tensor) -> Tensor:
    """Add the rows of a 2-D tensor together."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D input, got {x.shape}")
    n = x.shape[0]
    return _emit("sum_rows", x.data.sum(axis=0), (x,), lambda g: (np.broadcast_to(g, (n, g.shape[0])).copy(),))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"rowdot: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit("rowdot", (A * B).sum(axis=1), (a, b), lambda g: (g[:, None] * B, g[:, None] * A))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def dot(a: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(a * w)`` against a constant weight array."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {w.shape}")
    return _emit("dot", np.asarray((a.data * w).sum()), (a,), lambda g: (float(g) * w,))
