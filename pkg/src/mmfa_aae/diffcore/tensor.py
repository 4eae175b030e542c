"""Dense tensors with a recorded computation graph and reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class ShapeError(ValueError):
    """A tensor shape does not fit the operator it is fed to."""


class TapeMismatchError(ValueError):
    """Raised when a loss was not produced from the tape it is differentiated on."""


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A float array plus the information needed to backpropagate through it.

    Leaf tensors carry no parents.  Every operator in :mod:`ops` returns a new
    tensor that remembers its inputs and a closure mapping the output gradient
    to one gradient per input.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
        dtype=None,
    ):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float32 if arr.dtype == np.float32 else np.float64
        arr = arr.astype(dtype, copy=False)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    op: str,
) -> Tensor:
    """Wrap an operator result, recording the graph edge only when needed."""
    needs_grad = any(p.requires_grad for p in parents)
    if needs_grad:
        return Tensor(data, True, tuple(parents), backward_fn, op, dtype=data.dtype)
    return Tensor(data, False, (), None, op, dtype=data.dtype)


class Tape:
    """The recorded graph below an output tensor.

    ``forward`` returns one of these; :func:`gradient` uses it to check that a
    loss was actually computed downstream of that forward pass.
    """

    def __init__(self, output: Tensor, inputs: Mapping[str, Tensor] | None = None):
        self.output = output
        self.inputs = dict(inputs or {})
        self.stat_updates: dict = {}

    def contains(self, tensor: Tensor) -> bool:
        return any(t is tensor for t in _topological(self.output))


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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by ``id(tensor)``."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"gradient shape {pg.shape} != tensor shape {parent.shape} in op {node.op}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def gradient(
    tape: Tape | None,
    loss: Tensor,
    wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict:
    """Exact gradients of ``loss`` with respect to ``wrt`` (default: the tape inputs).

    Tensors that do not influence the loss get an all-zero gradient of their own
    shape, so the result always mirrors the requested parameter layout.
    """
    if tape is not None and not any(t is tape.output for t in _topological(loss)):
        raise TapeMismatchError("loss was not computed from this tape's output")
    if wrt is None:
        if tape is None:
            raise ValueError("need a tape or an explicit wrt mapping")
        wrt = tape.inputs
    grads = backward(loss)
    if isinstance(wrt, Mapping):
        return {
            name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()
        }
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
