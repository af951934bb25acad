"""Dense float32 tensors with a define-by-run gradient tape.

A :class:`Tape` is opened around a forward pass. Every primitive that sees a
tracked input appends a node to the active tape, so append order is already a
topological order and :func:`backward` is a single reverse sweep.

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    backward(loss)
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


def get_dtype():
    """Working precision of newly created tensors (float32 unless overridden)."""
    return getattr(_state, "dtype", DTYPE)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch working precision; finite-difference oracles run in float64."""
    saved = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = saved


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tape:
    """Append-only record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list = []
        self.grads: dict = {}
        self._owner = None

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    @staticmethod
    def current() -> Optional["Tape"]:
        tapes = _stack()
        return tapes[-1] if tapes else None

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable) -> None:
        # Tensors point at their tape weakly; only the newest output (which is
        # nobody's parent yet) keeps it alive. No reference cycles, so tapes and
        # their buffers are freed as soon as the last output goes away.
        owner = self._owner() if self._owner is not None else None
        if owner is not None:
            owner._keepalive = None
        out._keepalive = self
        self._owner = weakref.ref(out)
        out._tape_ref = weakref.ref(self)
        out._idx = len(self.nodes)
        # which parents want gradient is fixed here, so frozen() scopes need
        # not enclose the backward call
        self.nodes.append((tuple(parents), backward_fn, tuple(p.requires_grad for p in parents)))

    def backward(self, root: "Tensor") -> None:
        backward(root, self)


class Tensor:
    """Row-major float32 array, optionally attached to a tape.

    ``requires_grad`` on a leaf means gradients are accumulated into
    ``.grad`` when a backward sweep reaches it. Tensors produced by ops while
    a tape is active carry a node handle instead.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape_ref = None
        self._keepalive: Optional[Tape] = None
        self._idx: Optional[int] = None

    @property
    def _tape(self) -> Optional[Tape]:
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tracked = ", tracked" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tracked(t: Tensor) -> bool:
    return t.requires_grad


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any parent is tracked."""
    out = Tensor(data)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """Reverse sweep from a scalar ``root``.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = tape or root._tape
    if tape is None or root._tape is not tape:
        # root is a leaf or untracked: only a leaf can receive anything
        if root.requires_grad and root._tape_ref is None:
            _accumulate_leaf(root, np.ones_like(root.data))
            return
        raise ValueError("root was not recorded on the given tape")
    grads = {root._idx: np.ones_like(root.data)}
    tape.grads = grads
    for idx in range(root._idx, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        parents, backward_fn, wants = tape.nodes[idx]
        parent_grads = backward_fn(g)
        for p, pg, want in zip(parents, parent_grads, wants):
            if pg is None or not want:
                continue
            if p._tape is tape:
                if p._idx in grads:
                    grads[p._idx] = grads[p._idx] + pg
                else:
                    grads[p._idx] = pg
            elif p._tape_ref is None:
                _accumulate_leaf(p, pg)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), grad_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return make_node(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.log(x), (a,), lambda g: (g / x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def grad_fn(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))

    return make_node(np.maximum(a.data, b.data), (a, b), grad_fn)


# reductions and shape ----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first arg-max."""
    x = a.data
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_node(out, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_node(a.data[index], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), grad_fn)
