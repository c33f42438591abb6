"""Dense float64 tensors with a reverse-mode tape.

Operations executed while a :class:`Tape` is active are recorded on it
whenever at least one operand requires a gradient.  :func:`backward`
replays the records in reverse and returns a :class:`GradientMap`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

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
    def values(self) -> list[float]:
        """Row-major flat copy of the values."""
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: Callable):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; the tape is active only on the thread that
    entered it, so concurrent passes need one tape each.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._index: dict[int, int] = {}
        self._watched: dict[int, Tensor] = {}
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, tensor: Tensor) -> Tensor:
        """Ask for the gradient at ``tensor`` even though it is not a parameter.

        A tensor that is not yet on the tape becomes a leaf by declaration.
        """
        if id(tensor) not in self._index:
            tensor.requires_grad = True
        self._watched[id(tensor)] = tensor
        return tensor

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._index

    def record(self, inputs: Sequence[Tensor], output: Tensor, grad_fn: Callable) -> None:
        self._index[id(output)] = len(self.records)
        self.records.append(_Record(tuple(inputs), output, grad_fn))


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op result and record it if anything upstream needs grads.

    ``grad_fn(g)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward operation")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, grad_fn)
    return out


class GradientMap:
    """Gradients keyed by tensor identity; absent entries read as zeros."""

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _set(self, tensor: Tensor, grad: np.ndarray) -> None:
        self._grads[id(tensor)] = (tensor, grad)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._grads.get(id(tensor))
        if entry is None:
            return np.zeros(tensor.shape)
        return entry[1]

    def get(self, tensor: Tensor, default=None):
        entry = self._grads.get(id(tensor))
        return default if entry is None else entry[1]

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterable[tuple[Tensor, np.ndarray]]:
        return list(self._grads.values())


def _first_use(tape: Tape, t: Tensor) -> int:
    # earliest record whose gradient can reach t
    idx = tape._index.get(id(t))
    if idx is not None:
        return idx + 1
    for i, rec in enumerate(tape.records):
        if any(inp is t for inp in rec.inputs):
            return i
    return len(tape.records)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> GradientMap:
    """Reverse sweep from a scalar ``loss``.

    Without ``wrt`` the result holds every leaf that requires a gradient and
    every watched tensor.  With ``wrt`` only those tensors are reported and
    the sweep stops as soon as no earlier record can contribute to them.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced by this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    stop = 0
    if wrt is not None:
        stop = min((_first_use(tape, t) for t in wrt), default=0)

    leaves: dict[int, Tensor] = {}
    for i in range(len(tape.records) - 1, stop - 1, -1):
        rec = tape.records[i]
        g = grads.get(id(rec.output))
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in tape._index:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    result = GradientMap()
    if wrt is not None:
        for t in wrt:
            g = grads.get(id(t))
            if g is not None:
                result._set(t, g)
        return result
    for key, t in leaves.items():
        result._set(t, grads[key])
    for key, t in tape._watched.items():
        if key in grads:
            result._set(t, grads[key])
    return result
