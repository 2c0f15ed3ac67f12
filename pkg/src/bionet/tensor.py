"""Tensor value type, execution tape and reverse-mode differentiation.

Ops defined in :mod:`bionet.ops` register a forward/backward kernel pair in
``KERNELS``. When a :class:`Tape` is active, every op whose inputs require a
gradient appends an :class:`OpNode` to it; :func:`backward` walks the nodes in
reverse and accumulates gradients into the leaf tensors.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np

from .errors import StateError

__all__ = ["Tensor", "OpNode", "Tape", "backward", "current_tape", "KERNELS", "register_kernel"]


class Tensor:
    """Dense float array with an optional gradient buffer.

    Activations are rank-4 ``(N, C, H, W)``; parameters may be lower rank
    (biases, norm scales). Scalar losses are 0-d and kept in double precision.
    Identity-hashable, so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # kernel outputs keep their dtype (float32 activations, float64 scalars)
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Kernel(NamedTuple):
    forward: Callable[..., tuple[np.ndarray, dict]]
    backward: Callable[["OpNode", np.ndarray], tuple]


KERNELS: dict[str, Kernel] = {}


def register_kernel(kind: str, forward, backward) -> None:
    KERNELS[kind] = Kernel(forward, backward)


@dataclass(eq=False)
class OpNode:
    """One recorded op application.

    ``attrs`` are the non-tensor arguments (strides, targets, running-stat
    snapshots); ``saved`` holds intermediates needed by the backward kernel.
    """

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: dict[str, Any] = field(default_factory=dict)

    def recompute(self) -> np.ndarray:
        out, _ = KERNELS[self.kind].forward(*(t.data for t in self.inputs), **self.attrs)
        return out


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Execution record of one forward pass.

    Use as a context manager; ops executed inside the block are recorded.
    A tape may be re-entered (e.g. to append the loss after the forward).
    """

    def __init__(self):
        self.nodes: list[OpNode] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: OpNode) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def backward(tape: Tape, loss: Tensor, loss_grad: float = 1.0) -> dict[Tensor, np.ndarray]:
    """Propagate ``loss_grad`` from ``loss`` back through ``tape``.

    Gradients of leaf tensors with ``requires_grad`` are added to their
    ``grad`` buffers (so a tensor used several times receives the sum over all
    uses). Returns ``{leaf: gradient}`` for the leaves reached by this call.
    """
    if not tape.nodes or not tape.produced(loss):
        raise StateError("backward called before a forward pass recorded the loss on this tape")
    grads: dict[int, np.ndarray] = {
        id(loss): np.full(loss.shape, loss_grad, dtype=loss.data.dtype)
    }
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = KERNELS[node.kind].backward(node, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
        out[t] = g
    return out
