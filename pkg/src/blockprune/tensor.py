"""Dense float64 tensors with a small reverse-mode tape.

Only the operations needed to push a reconstruction loss back through a
LLaMA-style block are provided. Broadcasting is limited to a scalar operand
or two operands of identical shape; anything else raises ``DimensionError``.

Example::

    w = DTensor(np.ones((2, 2)), requires_grad=True)
    loss = frobenius_sq(matmul(x, w))
    backward(loss)
    w.grad
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, UsageError

RMS_EPS = 1e-6

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "parents", "backward", "index")

    def __init__(self, out, parents, backward, index):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.index = index


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order; ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: "DTensor", parents, backward: BackwardFn) -> None:
        node = _Node(out, tuple(parents), backward, len(self.nodes))
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_tape = Tape()


def current_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def fresh_tape():
    """Run a block of code against a private tape."""
    global _tape
    saved, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape.clear()
        _tape = saved


@contextlib.contextmanager
def no_grad():
    saved = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = saved


class DTensor:
    """A float64 array plus the bookkeeping for gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad=False) -> "DTensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t._tape = None
        t.name = None
        return t

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["DTensor"], backward: BackwardFn) -> "DTensor":
        """Create the output of a custom operation and record it if needed.

        ``backward`` receives the upstream gradient and returns one gradient
        (or ``None``) per parent, each shaped like that parent.
        """
        need = _tape.enabled and any(p.requires_grad for p in parents)
        out = cls._wrap(data, requires_grad=need)
        if need:
            _tape.record(out, parents, backward)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DTensor":
        return DTensor._wrap(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> DTensor:
    if isinstance(x, DTensor):
        return x
    return DTensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- matmul

def matmul(a, b) -> DTensor:
    """``a @ b`` with identical leading dims, or a batched ``a`` against a 2-d ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    shared = b.ndim == 2 and a.ndim > 2
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or (not shared and a.shape[:-2] != b.shape[:-2])):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return DTensor.from_op(out, (a, b), backward)


# ----------------------------------------------------------- elementwise

def _binary_shapes(a: DTensor, b: DTensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return DTensor.from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return DTensor.from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return DTensor.from_op(a.data * b.data, (a, b), backward)


def silu(a) -> DTensor:
    a = as_tensor(a)
    sig = expit(a.data)

    def backward(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return DTensor.from_op(a.data * sig, (a,), backward)


def square(a) -> DTensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return DTensor.from_op(a.data * a.data, (a,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "silu": silu, "square": square}


def elementwise(op: str, *args) -> DTensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------ reductions

def sum_all(a) -> DTensor:
    a = as_tensor(a)

    def backward(g):
        return (np.full(a.shape, np.asarray(g).item()),)

    return DTensor.from_op(np.array(a.data.sum()), (a,), backward)


def frobenius_sq(a) -> DTensor:
    a = as_tensor(a)
    flat = a.data.ravel()

    def backward(g):
        return (2.0 * np.asarray(g).item() * a.data,)

    return DTensor.from_op(np.array(np.dot(flat, flat)), (a,), backward)


# -------------------------------------------------------- normalisations

def softmax_rows(a) -> DTensor:
    """Softmax over the last axis; rows may contain ``-inf`` but not NaN/+inf."""
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax_rows: empty rows")
    if np.isnan(a.data).any() or np.isposinf(a.data).any():
        raise NumericError("softmax_rows: non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return DTensor.from_op(y, (a,), backward)


def rms_norm(a, gain) -> DTensor:
    a, gain = as_tensor(a), as_tensor(gain)
    d = a.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm: gain shape {gain.shape} does not match width {d}")
    x = a.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    xn = x * r

    def backward(g):
        ga = gg = None
        if a.requires_grad:
            gx = g * gain.data
            ga = r * gx - xn * (r / d) * (gx * xn).sum(axis=-1, keepdims=True)
        if gain.requires_grad:
            gg = (g * xn).reshape(-1, d).sum(axis=0)
        return ga, gg

    return DTensor.from_op(xn * gain.data, (a, gain), backward)


# ------------------------------------------------------------ reshaping

def reshape(a, shape) -> DTensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return DTensor.from_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> DTensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return DTensor.from_op(np.transpose(a.data, axes), (a,), backward)


def causal_fill(a) -> DTensor:
    """Set entries above the diagonal of the trailing square to ``-inf``."""
    a = as_tensor(a)
    s = a.shape[-1]
    if a.shape[-2] != s:
        raise DimensionError(f"causal_fill: trailing dims must be square, got {a.shape}")
    upper = np.triu(np.ones((s, s), dtype=bool), k=1)
    out = np.where(upper, -np.inf, a.data)

    def backward(g):
        return (np.where(upper, 0.0, g),)

    return DTensor.from_op(out, (a,), backward)


# -------------------------------------------------------------- backward

def backward(loss: DTensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf, then clear the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    tape = loss._tape
    if node is None or tape is None or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise UsageError("loss is not recorded on a live tape (backward already run, or no grad path)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        for parent, pg in zip(n.parents, n.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.clear()
