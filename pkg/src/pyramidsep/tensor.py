"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :meth:`Tensor.backward` orders the recorded graph topologically
(the implicit tape) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

_DEFAULT_DTYPE = np.float32


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and initializers."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus gradient buffer and autodiff lineage.

    ``data`` is always a C-contiguous float array.  ``grad`` is ``None`` until
    a backward pass reaches the tensor, after which gradients accumulate until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out.op = op
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise_add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scalar_scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul_2d(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor.

    The root must hold a single element.  A root that was not produced by a
    gradient-tracking op is a no-op.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elementwise_add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not np.isfinite(s):
        raise ValueError(f"scalar_scale: scale must be finite, got {s}")
    factor = a.data.dtype.type(s)
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def channel_scale(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply channel ``c`` of an (n, c, ...) tensor by the constant ``factors[c]``."""
    factors = np.asarray(factors, dtype=x.dtype)
    if factors.shape != (x.shape[1],):
        raise ValueError(f"channel_scale: need {x.shape[1]} factors, got {factors.shape}")
    f = factors.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    return Tensor._from_op(x.data * f, (x,), lambda g: (g * f,), "channel_scale")


def matmul_2d(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul_2d needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul_2d: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), _backward, "matmul")


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, returned with shape (1, 1, 1, 1)."""
    shape = a.shape
    return Tensor._from_op(
        a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1),
        (a,),
        lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),),
        "sum",
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def pad_channels(x: Tensor, c_out: int) -> Tensor:
    """Append all-zero channels so that an (n, c, h, w) tensor has ``c_out`` channels."""
    c_in = x.shape[1]
    if c_out < c_in:
        raise ValueError(f"pad_channels: c_out={c_out} is smaller than c_in={c_in}")
    if c_out == c_in:
        return x
    n, _, h, w = x.shape
    out = np.zeros((n, c_out, h, w), dtype=x.dtype)
    out[:, :c_in] = x.data
    return Tensor._from_op(out, (x,), lambda g: (g[:, :c_in],), "pad_channels")
