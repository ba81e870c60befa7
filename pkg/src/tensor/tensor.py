"""
Tensor and Autograd Core.

This module implements the dense tensor type and the reverse-mode automatic
differentiation machinery every model component is built on.

Design:
- `Tensor` wraps a NumPy array (float32 by default, float64 when handed a float64 array)
  and remembers the `Function` that produced it.
- `Function` subclasses implement `forward` (NumPy in, NumPy out) and `backward`
  (gradient of the output in, gradients of the inputs out). `Function.apply` wires
  the graph and checks every output for NaN/Inf.
- `Tensor.backward` walks the graph in reverse topological order and accumulates
  gradients into leaf tensors that require them.

Structural and arithmetic operations (add, mul, reshape, permute, slicing, concat,
sums) live here; the neural-network primitives live in `functional.py`.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import DimensionError, NumericError, StateError

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference, finite differences)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _as_float_array(data: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            return data
        dtype = np.float32
    return np.asarray(data, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes NumPy broadcasting added so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """
    Dense n-dimensional float array with optional gradient tracking.

    Attributes:
        data (np.ndarray): Row-major float32/float64 payload.
        requires_grad (bool): Whether gradients should flow to this tensor.
        grad (Optional[np.ndarray]): Accumulated gradient (leaf tensors only), same shape as data.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[Union[np.dtype, type]] = None,
        _ctx: Optional["Function"] = None,
    ):
        self.data: np.ndarray = _as_float_array(data, None if dtype is None else np.dtype(dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    # --- Introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- Autograd ---

    def _topological_order(self) -> List["Tensor"]:
        """Nodes reachable from self, outputs first (iterative to survive deep graphs)."""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent is not None and parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        order.reverse()
        return order

    def backward(self, grad: Optional[Any] = None) -> None:
        """
        Back-propagate from this tensor.

        Args:
            grad: Seed gradient (same shape as self). Defaults to ones for single-element tensors.

        Raises:
            StateError: If no seed is given and the tensor is not a single element.
            DimensionError: If the seed shape does not match.
        """
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() needs an explicit gradient for non-scalar outputs")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise DimensionError(f"gradient shape {seed.shape} does not match tensor shape {self.shape}")

        grads = {id(self): seed}
        for node in self._topological_order():
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{type(node._ctx).__name__}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # --- Operators ---

    def _lift(self, other: Any) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Add.apply(self, Neg.apply(self._lift(other)))

    def __rsub__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), Neg.apply(self))

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def permute(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=tuple(axes))

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward(*arrays, **kwargs) -> np.ndarray` and
    `backward(grad) -> tuple of input gradients` (None for inputs without a gradient).
    Inputs may be None (optional operands such as a missing bias).
    """

    def __init__(self) -> None:
        self.parents: Tuple[Optional[Tensor], ...] = ()

    def forward(self, *args: Any, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: Optional[Tensor], **kwargs: Any) -> Tensor:
        func = cls()
        tensors = tuple(
            t if (t is None or isinstance(t, Tensor)) else Tensor(t) for t in inputs
        )
        present = [t for t in tensors if t is not None]
        dtype = np.result_type(*(t.data.dtype for t in present)) if present else np.dtype(np.float32)
        raw = func.forward(*(None if t is None else t.data for t in tensors), **kwargs)
        out = np.asarray(raw, dtype=dtype)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__}: non-finite values in output")
        if is_grad_enabled() and any(t.requires_grad for t in present):
            func.parents = tensors
            return Tensor(out, requires_grad=True, dtype=dtype, _ctx=func)
        return Tensor(out, dtype=dtype)


# --- Arithmetic ---


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray):
        return (-grad,)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


# --- Reductions ---


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return a.sum(axis=self.axes, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad: np.ndarray):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return a.mean(axis=self.axes, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad: np.ndarray):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


# --- Structure ---


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(self, grad: np.ndarray):
        return (grad.reshape(self.shape),)


class Permute(Function):
    def forward(self, a: np.ndarray, axes: Tuple[int, ...] = ()) -> np.ndarray:
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
        self.inverse = tuple(np.argsort(axes))
        return a.transpose(axes)

    def backward(self, grad: np.ndarray):
        return (grad.transpose(self.inverse),)


class GetItem(Function):
    def forward(self, a: np.ndarray, index: Any = None) -> np.ndarray:
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad: np.ndarray):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"cannot concatenate shapes {[a.shape for a in arrays]} on axis {axis}") from exc

    def backward(self, grad: np.ndarray):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)

