"""Tensor and tape for reverse-mode differentiation.

Every op that sees an input with ``requires_grad`` appends its output to the
current :class:`Tape`.  The tape is already in topological order, so
:func:`backward` simply walks it in reverse.  A tape is consumed by exactly one
backward pass; a fresh tape is started afterwards.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def float64_mode():
    """Temporarily create new tensors in 64-bit (used by gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already consumed")
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


_current_tape = Tape()


def current_tape() -> Tape:
    return _current_tape


def reset_tape() -> Tape:
    """Drop any recorded graph and start a fresh tape."""
    global _current_tape
    _current_tape = Tape()
    return _current_tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "tape", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.tape: Optional[Tape] = None
        self.op: str = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, implemented in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(F.full_like(self, other), self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.slice(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output, recording it on the tape when any parent needs grad.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
        out.tape = _current_tape
        _current_tape.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``.

    Leaf gradients accumulate additively, so a parameter used twice gets the
    sum of both contributions.
    """
    global _current_tape
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is not None and tape.consumed:
        raise TapeError("backward: this tape was already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    if tape is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if len(tape) == 0:
        raise TapeError("backward: tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise AssertionError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.data.shape}")
            if parent.backward_fn is None:
                pg = pg.astype(parent.data.dtype, copy=False)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    tape.consumed = True
    for node in tape.nodes:
        # release closures so the graph can be garbage collected
        node.backward_fn = None
        node.parents = ()
        node.requires_grad = False
    tape.nodes = []
    if _current_tape is tape:
        _current_tape = Tape()
