"""Dense tensors with reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` that remembers the
:class:`Op` record that created it. Records carry a global sequence number,
so sorting the records reachable from a loss by that number yields a valid
topological order (inputs always exist before the ops that consume them).
:class:`Tape` is that ordered record; :func:`backward` replays it in reverse.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = [True]


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


@contextmanager
def no_grad():
    """Disable op recording inside the block."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Op:
    """One recorded primitive: inputs, the output and a vector-Jacobian closure."""

    __slots__ = ("name", "inputs", "vjp", "seq")

    def __init__(self, name: str, inputs: Sequence["Tensor"], vjp: Callable):
        self.name = name
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: Op | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in ops) ---------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, exponent):
        return _ops().power(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    @property
    def T(self):
        return _ops().transpose(self)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def relu(self):
        return _ops().relu(self)

    def sigmoid(self):
        return _ops().sigmoid(self)

    def exp(self):
        return _ops().exp(self)

    def log(self):
        return _ops().log(self)

    def backward(self) -> None:
        backward(self)


def _ops():
    from . import ops

    return ops


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def make_result(name: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``name`` and record it when needed.

    ``vjp(g)`` must return one gradient (or None) per input, each already
    shaped like that input.
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = Op(name, inputs, vjp)
    return out


class Tape:
    """Ordered record of the ops that contributed to ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.records: list[Tensor] = self._collect(root)

    @staticmethod
    def _collect(root: Tensor) -> list[Tensor]:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.op is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.op.inputs)
        found.sort(key=lambda t: t.op.seq)
        return found

    def __len__(self) -> int:
        return len(self.records)

    def op_names(self) -> list[str]:
        return [t.op.name for t in self.records]

    def backward(self, seed: np.ndarray | None = None) -> None:
        root = self.root
        if seed is None:
            seed = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): seed}
        for out in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = out.op.vjp(g)
            for inp, gi in zip(out.op.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.op is None:
                    # leaf
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        if root.op is None and root.requires_grad:
            root.grad = seed.copy() if root.grad is None else root.grad + seed


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    Tape(loss).backward()
