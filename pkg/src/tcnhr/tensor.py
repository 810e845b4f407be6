"""Dense tensors and a minimal reverse-mode gradient tape.

A :class:`Tensor` is a thin wrapper around a C-contiguous numpy array.
Storage is float32 by default; float64 is accepted so that gradient
checks can run well below float32 round-off.

Operations in :mod:`tcnhr.ops` append a record to the innermost active
:class:`GradTape` whenever one of their inputs requires a gradient.
``GradTape.backward`` replays those records in exact reverse order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import TapeError

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Row-major float array with shape metadata."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote a 0-d loss to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Gradients accumulate additively in ``self.grads`` (keyed by
    tensor identity) and a fresh tape starts with none. A tape is not
    thread-safe; run independent tapes for independent work.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        self.records.append(_Record(output, tuple(inputs), backward))

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if g.shape != t.shape:
            raise TapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = np.array(g, dtype=t.dtype, copy=True)
            self._keep[key] = t

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate d(loss)/d(.) to every recorded tensor that requires grad."""
        if not self.records:
            raise TapeError("backward called on an empty tape (no recorded forward)")
        if not any(r.output is loss for r in self.records):
            raise TapeError("loss tensor was not produced on this tape")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        self._accumulate(loss, seed)
        for rec in reversed(self.records):
            g_out = self._grads.get(id(rec.output))
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is not None and inp.requires_grad:
                    self._accumulate(inp, g)

    def grad(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient of ``t`` (zeros when nothing flowed into it)."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def record(output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Attach ``backward`` to the active tape when any input needs a gradient."""
    if _ACTIVE and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _ACTIVE[-1].record(output, inputs, backward)
    return output
