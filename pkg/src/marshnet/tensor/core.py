"""Tensor values and the tape that records how they were computed."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """An immutable n-d array of floats, optionally tracked for gradients.

    ``data`` is never modified in place.  Optimizers rebind ``data`` to a
    fresh array, which leaves any tape that saved the old array intact.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, dtype=DTYPE):
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor for freshly computed arrays: no copy.
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def assign(self, value: np.ndarray) -> None:
        """Rebind the stored array (used by optimizers and checkpoint loading)."""
        value = np.array(value, dtype=self.data.dtype, copy=True)
        if value.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {value.shape} vs {self.data.shape}")
        value.flags.writeable = False
        self.data = value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar delegates to ops so that it is taped.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return self + (-_as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations while active.

    Use as a context manager; ops executed outside any active tape are not
    recorded (inference mode).  Nodes are stored in creation order, which
    is a valid topological order.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def record(op: str, out_arr: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_arr`` and, if a tape is active and any input is tracked, record it."""
    tape = Tape.active()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=tracked)
    if tracked:
        tape.nodes.append(Node(op, out, tuple(inputs), vjp))
    if not np.all(np.isfinite(out_arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape`` from the scalar ``loss``.

    Returns a mapping from tensor to gradient array.  With ``wrt=None`` the
    mapping covers every tracked leaf the tape touched (the parameters);
    otherwise exactly the requested tensors, which may be intermediates.
    Tensors the loss does not depend on get zero gradients.  The tape is
    not modified, so calling this twice gives identical results.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi

    targets = list(leaves.values()) if wrt is None else list(wrt)
    out: dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else g
    return out
