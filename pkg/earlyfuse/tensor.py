"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation is a :class:`Function` subclass with a ``forward`` over arrays and a
``backward`` that maps the output gradient to one gradient per input. Calling
``Tensor.backward()`` collects the producing graph in topological order and
walks it once in reverse, summing gradients over fan-out.

Every operation returns fresh storage; nothing aliases across the autodiff
boundary.
"""

import contextlib
import logging
import threading
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError, TokenIndexError

logger = logging.getLogger(__name__)

_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype: type = np.float32
_grad_mode = threading.local()

GELU_COEFF = 0.044715
SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


def get_default_dtype() -> type:
    """Return the float type new tensors are stored in."""
    return _default_dtype


def set_default_dtype(dtype: Any) -> None:
    """Select float32 (training) or float64 (gradient checks) storage."""
    global _default_dtype
    resolved = np.dtype(dtype).type
    if resolved not in _SUPPORTED_DTYPES:
        raise ConfigurationError(f"Unsupported tensor dtype {dtype!r}; use float32 or float64")
    _default_dtype = resolved


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default storage type."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph (current thread only)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: ArrayLike, **kwargs: Any) -> "Tensor":
        inputs = tuple(as_tensor(t) for t in tensors)
        fn = cls(*inputs)
        data = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(data, requires_grad=requires_grad)
        if requires_grad:
            out._ctx = fn
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum ``grad`` down to ``to_shape`` after numpy broadcasting."""
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(to_shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=_default_dtype if dtype is None else dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx: Optional[Function] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.grad = None
        out.requires_grad = requires_grad
        out._ctx = None
        return out

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

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy without history; gradients never flow through the copy."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        Graph.from_output(self).backward(grad)

    # arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        if not isinstance(other, (int, float, np.number)):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return Mul.apply(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    # reductions and shape
    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return Transpose.apply(self, axes=tuple(axes))

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def softmax(self, axis: int = -1) -> "Tensor":
        return Softmax.apply(self, axis=axis)

    def gelu(self) -> "Tensor":
        return Gelu.apply(self)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Graph:
    """Operations reachable from an output, inputs before outputs."""

    def __init__(self, output: Tensor, order: List[Tensor]):
        self.output = output
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
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
                for parent in node._ctx.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(output, order)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``grad`` (ones for a scalar output) to every leaf."""
        if not self.output.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.output.data)
        pending = {id(self.output): np.asarray(grad, dtype=self.output.dtype)}
        for node in reversed(self.order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                node_grad = np.array(node_grad, dtype=node.dtype)
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            input_grads = node._ctx.backward(node_grad)
            for parent, parent_grad in zip(node._ctx.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise DimensionError("add", x.shape, y.shape) from None
        self.x_shape, self.y_shape = x.shape, y.shape
        return x + y

    def backward(self, grad):
        return self.unbroadcast(grad, self.x_shape), self.unbroadcast(grad, self.y_shape)


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise DimensionError("mul", x.shape, y.shape) from None
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.y, self.x.shape),
            self.unbroadcast(grad * self.x, self.y.shape),
        )


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError("matmul", a.shape, b.shape, detail="batch dimensions") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return self.unbroadcast(grad_a, self.a.shape), self.unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        self.in_shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    def forward(self, x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        total = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return total / max(self.count, 1)

    def backward(self, grad):
        (expanded,) = super().backward(grad)
        return (expanded / max(self.count, 1),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return x.reshape(shape).copy()
        except ValueError:
            raise DimensionError("reshape", x.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
        return np.transpose(x, self.axes).copy()

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return np.broadcast_to(x, shape).copy()
        except ValueError:
            raise DimensionError("broadcast_to", x.shape, shape) from None

    def backward(self, grad):
        return (self.unbroadcast(grad, self.in_shape),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise DimensionError("concat", *(a.shape for a in arrays)) from None

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError("softmax", x.shape, detail=f"axis {axis} out of range")
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        # backward reads self.out; callers may write to what they get
        return self.out.copy()

    def backward(self, grad):
        dot = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


class LayerNorm(Function):
    """Normalization over the last axis fused with its affine transform."""

    def forward(self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        if eps <= 0:
            raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.rstd
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        reduce_axes = tuple(range(grad.ndim - 1))
        grad_gain = (grad * self.xhat).sum(axis=reduce_axes)
        grad_bias = grad.sum(axis=reduce_axes)
        dxhat = grad * self.gain
        grad_x = self.rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias


class Gelu(Function):
    """GELU, tanh approximation."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.t = np.tanh(SQRT_2_OVER_PI * (x + GELU_COEFF * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner
        return (grad * local,)


class MSE(Function):
    def forward(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        if pred.shape != target.shape:
            raise DimensionError("mse", pred.shape, target.shape)
        self.diff = pred - target
        if self.diff.size == 0:
            return np.zeros((), dtype=pred.dtype)
        return np.asarray((self.diff * self.diff).mean())

    def backward(self, grad):
        if self.diff.size == 0:
            return np.zeros_like(self.diff), np.zeros_like(self.diff)
        local = grad * (2.0 / self.diff.size) * self.diff
        return local, -local


def _check_rows(index: np.ndarray, n_rows: int, op: str) -> None:
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise TokenIndexError(f"{op}: index out of range for {n_rows} rows")


class GatherRows(Function):
    """Select rows along the second-to-last axis.

    ``index`` is either one list shared by every leading slice, or one list
    per batch element (shape ``[B, k]`` against ``x`` of shape ``[B, n, D]``).
    """

    def forward(self, x: np.ndarray, index: Any = None) -> np.ndarray:
        index = np.asarray(index, dtype=np.intp)
        if x.ndim < 2:
            raise DimensionError("gather_rows", x.shape, detail="need at least rows and columns")
        _check_rows(index, x.shape[-2], "gather_rows")
        self.in_shape, self.index = x.shape, index
        if index.ndim == 1:
            return np.take(x, index, axis=-2)
        if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
            raise DimensionError("gather_rows", x.shape, index.shape, detail="per-sample index")
        self.batch = np.arange(x.shape[0])[:, None]
        return x[self.batch, index]

    def backward(self, grad):
        grad_x = np.zeros(self.in_shape, dtype=grad.dtype)
        if self.index.ndim == 1:
            np.add.at(np.moveaxis(grad_x, -2, 0), self.index, np.moveaxis(grad, -2, 0))
        else:
            np.add.at(grad_x, (self.batch, self.index), grad)
        return (grad_x,)


class ScatterRows(Function):
    """Place rows of ``x`` at ``index`` in a zero tensor with ``n_rows`` rows."""

    def forward(self, x: np.ndarray, index: Any = None, n_rows: int = 0) -> np.ndarray:
        index = np.asarray(index, dtype=np.intp)
        _check_rows(index, n_rows, "scatter_rows")
        ordered = np.sort(index, axis=-1)
        if index.shape[-1] > 1 and np.any(ordered[..., 1:] == ordered[..., :-1]):
            raise TokenIndexError("scatter_rows: duplicate index")
        if x.shape[-2] != index.shape[-1]:
            raise DimensionError("scatter_rows", x.shape, index.shape)
        self.index = index
        out_shape = x.shape[:-2] + (n_rows, x.shape[-1])
        out = np.zeros(out_shape, dtype=x.dtype)
        if index.ndim == 1:
            out[..., index, :] = x
        else:
            if x.ndim != 3 or index.shape[0] != x.shape[0]:
                raise DimensionError("scatter_rows", x.shape, index.shape, detail="per-sample index")
            self.batch = np.arange(x.shape[0])[:, None]
            out[self.batch, index] = x
        return out

    def backward(self, grad):
        if self.index.ndim == 1:
            return (np.take(grad, self.index, axis=-2),)
        return (grad[self.batch, self.index],)


# functional surface


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: ArrayLike) -> Tensor:
    return Gelu.apply(x)


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    return MSE.apply(pred, target)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def gather_rows(x: ArrayLike, index: Any) -> Tensor:
    return GatherRows.apply(x, index=index)


def scatter_rows(x: ArrayLike, index: Any, n_rows: int) -> Tensor:
    return ScatterRows.apply(x, index=index, n_rows=n_rows)
