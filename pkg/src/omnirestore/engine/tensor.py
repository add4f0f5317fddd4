"""Dense tensors with reverse-mode gradients over a linear op tape.

The engine keeps one active :class:`GradTape` per logical execution context.
Every primitive op appends an entry (inputs, output, backward closure) while
grad mode is on; ``backward(loss)`` replays the tape once in reverse order,
accumulating gradients into leaf tensors. Tensors are treated as immutable
once produced by an op; parameter updates happen between tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional array of real scalars, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Minimal operator sugar; full op set lives in engine.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other, self))

    def __radd__(self, other):
        from . import ops

        return ops.add(_wrap(other, self), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other, self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_wrap(other, self), self)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.mul_scalar(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class TapeEntry:
    """One executed primitive op: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "replays")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.replays = 0


class GradTape:
    """Ordered record of executed ops for one forward/backward pair."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()


class _EngineState(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.grad_enabled = True


_STATE = _EngineState()


def tape() -> GradTape:
    """The tape of the current execution context."""
    return _STATE.tape


def reset_tape() -> None:
    _STATE.tape = GradTape()


def grad_enabled() -> bool:
    return _STATE.grad_enabled


class no_grad:
    """Context manager that disables op recording (inference mode)."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result; append a tape entry when gradients are live."""
    track = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._leaf = False
        _STATE.tape.entries.append(TapeEntry(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, seed: Optional[np.ndarray] = None, retain: bool = False) -> int:
    """Replay the tape in reverse, populating ``grad`` on leaf tensors.

    Each tape entry contributing to ``loss`` runs exactly once. Returns the
    number of replayed entries. The tape is cleared afterwards unless
    ``retain`` is set (used by replay-count checks).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if seed is None:
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=loss.data.dtype)
        if seed.shape != loss.data.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != loss shape {loss.data.shape}")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    if loss.requires_grad and loss._leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed

    t = _STATE.tape
    replayed = 0
    for entry in reversed(t.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        entry.replays += 1
        replayed += 1
        in_grads = entry.backward_fn(g)
        for tensor, ig in zip(entry.inputs, in_grads):
            if ig is None or not tensor.requires_grad:
                continue
            if tensor._leaf:
                tensor.grad = ig if tensor.grad is None else tensor.grad + ig
            else:
                prev = grads.get(id(tensor))
                grads[id(tensor)] = ig if prev is None else prev + ig
    if not retain:
        t.clear()
    return replayed
