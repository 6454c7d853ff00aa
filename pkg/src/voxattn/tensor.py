"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` is a thin wrapper around a numpy array.  Operations in
:mod:`voxattn.ops` record a node on the innermost active :class:`Tape` when at
least one of their inputs requires a gradient; with no tape active they are
plain forward computations.

    with Tape() as tape:
        loss = ops.softmax_cross_entropy(logits, labels)
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional real array, layout (N, C, D, H, W) for volumes, W fastest."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the kernels live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(_lift(other, self)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(_lift(other, self), ops.neg(self))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    ``dtype`` fixes the arithmetic precision of every op recorded while the
    tape is active (float64 for gradient checking).  With ``checked=True``
    each op's output is tested for NaN/Inf.  ``recording=False`` gives a
    precision context that keeps no graph.
    """

    dtype: type = np.float32
    checked: bool = False
    recording: bool = True
    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype).type
        if self.dtype not in _FLOAT_TYPES:
            raise UsageError(f"tape precision must be float32 or float64, got {self.dtype}")
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        if not self.recording:
            return
        self.nodes.append(Node(op, tuple(inputs), output, vjp))
        self._produced.add(id(output))

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        Repeated calls add to existing leaf gradients.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=self.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    gi = gi.astype(t.dtype, copy=False).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def precision(*tensors: Tensor):
    tape = active_tape()
    if tape is not None:
        return tape.dtype
    for t in tensors:
        if t is not None and t.dtype == np.float64:
            return np.float64
    return np.float32


def check_finite(arr: np.ndarray, op: str) -> None:
    tape = active_tape()
    if tape is not None and tape.checked and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in output of {op}")
