"""Dense rank-2 tensors with tape-based reverse-mode differentiation.

Every tensor is a float64 matrix. Operations executed while a :class:`Tape`
is active, and whose inputs need gradients, are appended to that tape;
:func:`backward` replays the tape in reverse recording order.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(mul(x, x))
    >>> backward(loss)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh_elem",
    "softmax_rows",
    "layer_norm_rows",
    "concat_rows",
    "mean_rows",
    "sum_all",
    "transpose",
    "take_rows",
    "topk_mean_rows",
    "cosine_matrix",
    "cosine_rows",
    "cross_entropy",
    "relative_error",
    "numerical_grad",
]

LN_EPS = 1e-5
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported (max rank 2)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order because an operation's inputs
    always exist before its output. Tapes are thread-local when active.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor._from_op(data)
    tape = _active_tape()
    if tape is not None and any(_tracked(x) for x in inputs):
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise RuntimeError("loss was not recorded on a tape; run the forward pass inside `with Tape():`")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not _tracked(x):
                continue
            if x._tape is None:
                x.grad += gx
            else:
                key = id(x)
                prev = grads.get(key)
                grads[key] = gx if prev is None else prev + gx


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(x.data * s, (x,), lambda g: (g * s,))


def _tanh_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - y * y)


def tanh_elem(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    # module-level lookup so the gradcheck mutation sentinel can patch it
    return _emit(y, (x,), lambda g: (_tanh_grad(y, g),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (x,), grad_fn)


def layer_norm_rows(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardisation to zero mean and unit population variance.

    No gain or bias. ``eps`` is added to the variance; with ``eps == 0`` a
    constant row raises :class:`ZeroDivisionError`.
    """
    if x.shape[1] < 2:
        raise ShapeError(f"layer_norm_rows needs at least 2 columns, got {x.shape}")
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    X = x.data
    centered = X - X.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True) + eps
    if np.any(var == 0.0):
        raise ZeroDivisionError("layer_norm_rows: constant row with eps=0")
    inv = 1.0 / np.sqrt(var)
    y = centered * inv

    def grad_fn(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (x,), grad_fn)


def concat_rows(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_rows needs at least one tensor")
    d = xs[0].shape[1]
    for x in xs[1:]:
        if x.shape[1] != d:
            raise ShapeError(f"concat_rows: column mismatch {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def grad_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _emit(np.concatenate([x.data for x in xs], axis=0), xs, grad_fn)


def mean_rows(x: Tensor) -> Tensor:
    """Average of the rows: (m, d) -> (1, d)."""
    m = x.shape[0]
    return _emit(x.data.mean(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g / m, m, axis=0),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def transpose(x: Tensor) -> Tensor:
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def take_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), grad_fn)


def topk_mean_rows(x: Tensor, k: int) -> Tensor:
    """Column-wise mean of the ``k`` largest entries: (n, c) -> (1, c).

    Ties resolve to the lowest row index. ``k = 1`` is a column max.
    """
    n, c = x.shape
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-x.data, axis=0, kind="stable")[:k]
    cols = np.broadcast_to(np.arange(c), order.shape)
    y = x.data[order, cols].mean(axis=0, keepdims=True)

    def grad_fn(g):
        gx = np.zeros((n, c))
        gx[order, cols] = np.broadcast_to(g / k, order.shape)
        return (gx,)

    return _emit(y, (x,), grad_fn)


def cosine_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows: (n, d), (m, d) -> (n, m)."""
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"cosine: feature dimensions differ {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x.data, axis=1, keepdims=True)
    ny = np.linalg.norm(y.data, axis=1, keepdims=True)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise DomainError("cosine similarity is undefined for zero-norm rows")
    xh = x.data / nx
    yh = y.data / ny
    c = xh @ yh.T

    def grad_fn(g):
        gc = g * c
        gx = (g @ yh - gc.sum(axis=1, keepdims=True) * xh) / nx
        gy = (g.T @ xh - gc.sum(axis=0)[:, None] * yh) / ny
        return gx, gy

    return _emit(c, (x, y), grad_fn)


def cosine_rows(x: Tensor, y: Tensor) -> Tensor:
    if x.shape[0] != 1 or y.shape[0] != 1:
        raise ShapeError(f"cosine_rows takes two row vectors, got {x.shape} and {y.shape}")
    return cosine_matrix(x, y)


def cross_entropy(p: Tensor, label: int, floor: float = PROB_FLOOR) -> Tensor:
    """``-log p[label]`` for a 1xC probability row, with ``p[label]`` floored."""
    if p.shape[0] != 1:
        raise ShapeError(f"cross_entropy expects a 1xC row, got {p.shape}")
    C = p.shape[1]
    if not 0 <= label < C:
        raise IndexError(f"label {label} out of range for {C} classes")
    P = p.data
    if np.any(P < 0) or abs(P.sum() - 1.0) > 1e-6:
        raise DomainError(f"cross_entropy expects a probability row (sum={P.sum():.8g})")
    pl = P[0, label]
    clamped = pl < floor
    loss = -np.log(max(pl, floor))

    def grad_fn(g):
        gp = np.zeros_like(P)
        if not clamped:
            gp[0, label] = -g[0, 0] / pl
        return (gp,)

    return _emit(np.array([[loss]]), (p,), grad_fn)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference; absolute when both sides are ~0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    return float(diff if denom < 1e-10 else diff / denom)


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
