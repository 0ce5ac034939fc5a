"""Dense float tensor with a dynamically recorded reverse-mode gradient tape.

Layout convention for image data is (batch, channels, height, width).
Tensors are fp32 by default; an fp64 mode exists for gradient verification
(see :func:`use_dtype`). Op outputs are checked for NaN/Inf: a non-finite
value raises instead of propagating silently.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


_state = threading.local()


def _default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default tensor dtype (fp64 verification mode)."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; ops run without building a backward graph."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class TapeNode:
    """One recorded op: input tensor refs plus the rule mapping the output
    gradient to per-input gradients (raw arrays, aligned with ``inputs``)."""

    __slots__ = ("inputs", "backward", "name")

    def __init__(self, inputs: tuple["Tensor", ...], backward: Callable, name: str):
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tensor:
    """N-dimensional float array participating in reverse-mode autodiff.

    Data is immutable by convention once created (the optimizer, the single
    writer during training, replaces ``data`` wholesale); ``grad`` is the
    only mutable field and accumulates across ``backward`` calls until
    cleared with :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.node = None
        return out

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar (size 1). Repeated calls accumulate; use
        :meth:`zero_grad` on the leaves to reset.
        """
        backward(self)

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # -- arithmetic sugar (full op set lives in prnet.ops) ------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


class GradTape:
    """The recorded computation slice reaching one output, in topological
    order (every node's inputs precede it)."""

    __slots__ = ("order",)

    def __init__(self, order: list[Tensor]):
        self.order = order

    @classmethod
    def trace(cls, output: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # Iterative DFS; training graphs are deep enough to overflow the
        # recursion limit.
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def backprop(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = g.copy()
                    else:
                        t.grad = t.grad + g
                continue
            for parent, pg in zip(t.node.inputs, t.node.backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar tensor, got shape {loss.shape}")
    tape = GradTape.trace(loss)
    seed = np.ones_like(loss.data)
    tape.backprop(loss, seed)


def check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable,
    name: str,
) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are needed."""
    check_finite(data, name)
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(tuple(inputs), backward_fn, name)
    return out


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Coerce scalars/arrays to a constant Tensor matching the ambient dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else _default_dtype()
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.node is None and t.requires_grad]
