"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when produced by a differentiable
operation, remembers its parents together with a closure that maps the
output gradient to parent gradients.  :func:`backward` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense real tensor with an optional gradient buffer."""

    __slots__ = ("_backward", "_parents", "data", "grad", "name", "op", "requires_grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: str = "",
        _parents: Sequence[Tensor] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if not needs:
            return cls(data, op=op)
        return cls(data, requires_grad=True, _parents=parents, _backward=backward, op=op)

    # -- array protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor.from_op(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor.from_op(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor.from_op(a / b, (self, other), bw, "div")

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) / self

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data

        def bw(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor.from_op(a**exponent, (self,), bw, f"pow{exponent}")

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

        need_a, need_b = self.requires_grad, other.requires_grad

        def bw(g):
            return (g @ b.T if need_a else None), (a.T @ g if need_b else None)

        return Tensor.from_op(a @ b, (self, other), bw, "matmul")

    # -- reductions / shape ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, idx) -> Tensor:
        shape, dtype = self.shape, self.dtype

        def bw(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor.from_op(np.asarray(self.data[idx]), (self,), bw, "getitem")

    # -- elementwise nonlinearities --------------------------------------
    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> Tensor:
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def clip(self, lo: float, hi: float) -> Tensor:
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor.from_op(np.clip(a, lo, hi), (self,), lambda g: (g * inside,), "clip")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


@dataclass
class Node:
    id: int
    op: str
    inputs: list[int]
    tensor: Tensor


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph feeding one output tensor."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        ids = {id(t): i for i, t in enumerate(order)}
        nodes = [
            Node(i, t.op, [ids[id(p)] for p in t._parents if id(p) in ids], t) for i, t in enumerate(order)
        ]
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> ComputeGraph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    Returns the traversed graph.  Intermediate gradients are released.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph.from_output(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph
