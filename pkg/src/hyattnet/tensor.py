"""Dense tensors plus taped reverse-mode automatic differentiation.

Tensors wrap a flat row-major numpy buffer. Differentiable operations
(see ops.py) record themselves on the innermost active ``Tape``; calling
``backward`` replays the tape in reverse execution order and accumulates
gradients into every ``requires_grad`` tensor reachable from the loss.

Scalars are float32 by default. A float64 mode exists for tight-tolerance
numerical checks; switch it with ``default_dtype``.
"""

from __future__ import annotations

import contextlib

import numpy as np


class HyattError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(HyattError, ValueError):
    """A tensor argument has an incompatible shape or axis extent."""


class ConfigError(HyattError, ValueError):
    """A configuration value violates its invariants."""


_DEFAULT_DTYPE = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """N-dimensional array of scalars with an optional gradient buffer.

    4-D feature maps use (batch, channels, height, width) layout. Data is
    treated as immutable after construction except for whole-buffer
    parameter updates performed by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        """The underlying buffer (callers must not mutate it)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        if self.size != 1:
            raise ShapeError(f"cannot convert tensor of shape {self.shape} to a scalar")
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; implementations attached at the end of ops.py.


class Tape:
    """Ordered record of differentiable operations.

    Each node stores the op's output, its input tensors and a vector-Jacobian
    closure over the cached forward intermediates. Usable as a context
    manager; nesting pushes an inner tape that records instead.
    """

    def __init__(self):
        self._nodes = []

    def record(self, output: Tensor, inputs: tuple, vjp) -> None:
        self._nodes.append((output, inputs, vjp))

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap an op result, recording it when a tape is active and any input
    requires a gradient. ``vjp(grad_out)`` must return one gradient (or
    None) per entry of ``inputs``."""
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every requires_grad tensor reachable from
    ``loss`` by replaying ``tape`` in reverse execution order.

    Repeated calls without zeroing accumulate into existing ``grad``
    buffers; each call contributes exactly one pass worth of gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    pass_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for output, inputs, vjp in reversed(tape._nodes):
        upstream = pass_grads.get(id(output))
        if upstream is None:
            continue  # branch not reachable from the loss
        for tensor, grad in zip(inputs, vjp(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pass_grads:
                pass_grads[key] = pass_grads[key] + grad
            else:
                pass_grads[key] = grad
                holders[key] = tensor
    for key, tensor in holders.items():
        if not tensor.requires_grad:
            continue
        contribution = pass_grads[key].astype(tensor.data.dtype, copy=False)
        if tensor.grad is None:
            tensor.grad = contribution.reshape(tensor.shape).copy()
        else:
            tensor.grad = tensor.grad + contribution.reshape(tensor.shape)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
