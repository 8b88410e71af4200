"""Dense float64 tensors and the reverse-mode recording tape."""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "mcncl_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeTensor:
    """A float64 array plus a lazily allocated gradient buffer.

    ``node_id`` is set while the tensor is the output of an operation recorded on
    the active tape; constants and parameters never carry one.
    """

    __slots__ = ("values", "grad", "node_id", "trainable", "name")

    def __init__(self, values, trainable: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self.node_id is not None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"TapeTensor(shape={self.shape}{tag}, trainable={self.trainable})"


def parameter(values, name: Optional[str] = None) -> TapeTensor:
    return TapeTensor(values, trainable=True, name=name)


def constant(values) -> TapeTensor:
    if isinstance(values, TapeTensor):
        return values
    return TapeTensor(values)


@dataclass
class _Record:
    out: TapeTensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager; operations evaluated inside the block are recorded
    and :meth:`backward` replays them in exact reverse order, then frees them.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def _push(self, out: TapeTensor, inputs: tuple, backward) -> None:
        out.node_id = len(self._records)
        self._records.append(_Record(out, inputs, backward))

    def backward(self, loss: TapeTensor) -> None:
        if loss.values.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self._records) or self._records[loss.node_id].out is not loss:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones(())
        trainables = {}
        for rec in reversed(self._records[: loss.node_id + 1]):
            g = rec.out.grad
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if t.trainable:
                    trainables[id(t)] = t
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.values.shape:
                    raise ShapeError(f"gradient shape {gi.shape} != value shape {t.values.shape}")
                if t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    t.grad = t.grad + gi
        for t in trainables.values():
            if t.grad is None:
                t.zero_grad()
        for rec in self._records:
            rec.out.node_id = None
        self._records.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def apply_op(values: np.ndarray, inputs: Sequence[TapeTensor], backward) -> TapeTensor:
    """Wrap ``values`` as the output of an op over ``inputs``.

    ``backward(grad_out)`` must return one gradient (or None) per input. Nothing
    is recorded when no tape is active or no input needs a gradient, so plain
    evaluation (e.g. finite differences) costs no bookkeeping.
    """
    out = TapeTensor(values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._push(out, tuple(inputs), backward)
    return out
