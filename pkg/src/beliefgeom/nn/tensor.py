from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's contract."""


class NumericalError(FloatingPointError):
    """A forward value became NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build values without recording the tape (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation.

    ``_backward`` receives the upstream gradient and returns one gradient per
    parent (``None`` for parents that do not need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"op '{node.op}' produced gradient {g.shape} for operand {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g if g.dtype == parent.data.dtype else g.astype(parent.data.dtype)
                else:
                    # out of place: g may alias another operand's gradient
                    parent.grad = parent.grad + g
            if node._parents:
                node.grad = None  # interior grads are not needed after propagation
        seen: set[int] = set()
        for node in order:
            if node.grad is not None:
                if id(node.grad) in seen:
                    node.grad = node.grad.copy()
                seen.add(id(node.grad))


class Parameter(Tensor):
    """A trainable tensor carrying its AdamW moments."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True, op="param")
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, attaching the tape record only when needed."""
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest op (in evaluation order) whose output is non-finite."""
    for node in _topological(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def forward_backward(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> float:
    """Evaluate ``loss_fn``, check it, and populate ``grad`` on every parameter.

    Existing gradients are cleared first, so each call yields exactly the
    derivative of this loss.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(first_nonfinite(loss) or loss.op)
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return value
