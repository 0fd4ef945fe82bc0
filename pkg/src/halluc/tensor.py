"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array.  Operations (see halluc.ops) record
their inputs and a backward closure on the result, forming an implicit tape;
``backward(loss)`` replays that tape once in reverse topological order and
accumulates gradients into every reachable requires_grad leaf.  A tape is
single-use: running backward through an already-consumed node raises.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision: str) -> np.dtype:
    """Map a precision flag ('single' or 'double') to a numpy dtype."""
    try:
        return np.dtype(_PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'")


class ShapeError(ValueError):
    """Operands have incompatible shapes or geometry."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (non-scalar loss, double backward, ...)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Optional[tuple] = None
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._parents is not None:
            flags.append("node")
        tail = f", {' '.join(flags)}" if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tail})"

    # Arithmetic dunders are installed by halluc.ops at import time.


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (forward-only evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op result, recording the tape node when gradients are on.

    `backward` maps the output gradient to a tuple of parent gradients
    (None for parents that need none).
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _topo_order(loss: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack: list = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from `loss`.

    Gradients accumulate (+=) into leaves across separate backward calls on
    disjoint tapes; re-running backward through the same tape raises TapeError.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any requires_grad tensor")

    order = _topo_order(loss)
    for node in order:
        if node._consumed:
            raise TapeError("tape already consumed; rebuild the graph before calling backward again")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._parents is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node._consumed = True
        parent_grads = node._backward(grad)
        for parent, pgrad in zip(node._parents, parent_grads):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pgrad
            else:
                grads[key] = pgrad


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
