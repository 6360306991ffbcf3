"""Dense numpy tensors with reverse-mode differentiation.

Each primitive is a ``Function`` with a ``forward`` over raw arrays and a
``backward`` returning one gradient per parent (``None`` for parents that
take none). ``Function.apply`` records the graph only when gradients are
enabled and some input requires them.

Conventions:
    - relu uses subgradient 0 at 0
    - ``stop_gradient`` detaches; nothing upstream of it receives gradient
    - batch norm in eval mode is the affine map given by the running stats
"""

import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union["Tensor", np.ndarray, float, int]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a value or gradient is NaN or infinite."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """An array plus an optional gradient slot and the Function that produced it."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx: Optional["Function"] = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # --- operators ---

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(self._lift(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._lift(other), Neg.apply(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: Union[float, int, np.ndarray]) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("Division by a Tensor is not supported")
        return Mul.apply(self, self._lift(1.0 / np.asarray(other, dtype=self.dtype)))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, self._lift(other))

    def __getitem__(self, index: Any) -> "Tensor":
        return Slice.apply(self, index=index)

    # --- methods ---

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return Softmax.apply(self, axis=axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return LogSoftmax.apply(self, axis=axis)


class Function:
    """One differentiable operation; instances double as graph nodes."""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        ctx = cls(*inputs)
        out = ctx.forward(*[t.data for t in inputs], **kwargs)
        needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs_grad)
        if needs_grad:
            result._ctx = ctx
        return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_check(x, y, "add")
        return x + y

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return grad, grad


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        _broadcast_check(x, y, "mul")
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return grad * self.y, grad * self.x


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (-grad,)


class MatMul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return grad @ self.y.T, self.x.T @ grad


class Conv2d(Function):
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) weights, im2col based."""

    def forward(
        self, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 1
    ) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
        batch, channels, height, width = x.shape
        out_channels, _, kh, kw = w.shape
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padded.shape[2] < kh or padded.shape[3] < kw:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {padded.shape}")
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out_h, out_w = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, -1)
        out = cols @ w.reshape(out_channels, -1).T
        self.cols, self.w = cols, w
        self.stride, self.padding = stride, padding
        self.padded_shape = padded.shape
        self.out_hw = (out_h, out_w)
        return out.reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        out_channels, channels, kh, kw = self.w.shape
        batch = grad.shape[0]
        out_h, out_w = self.out_hw
        g = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g.T @ self.cols).reshape(self.w.shape)
        grad_cols = (g @ self.w.reshape(out_channels, -1)).reshape(
            batch, out_h, out_w, channels, kh, kw
        )
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s
                ] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        grad_x = grad_padded[:, :, p : grad_padded.shape[2] - p, p : grad_padded.shape[3] - p]
        return grad_x, grad_w


class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = 0.5 * (np.tanh(0.5 * x) + 1.0)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * (1.0 - self.out**2),)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad / self.x,)


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        shifted = x - x.max(axis=axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - log_norm
        self.probs = np.exp(out)
        self.axis = axis
        return out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad - self.probs * grad.sum(axis=self.axis, keepdims=True),)


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out.astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad.reshape(self.shape),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = -1) -> np.ndarray:
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ShapeError(f"concat along {axis}: incompatible shapes {shapes}") from None
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Slice(Function):
    def forward(self, x: np.ndarray, index: Any = None) -> np.ndarray:
        self.shape, self.index, self.dtype = x.shape, index, x.dtype
        return np.array(x[index])

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class L2Normalize(Function):
    """x / max(||x||, eps) along ``axis``."""

    def forward(self, x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        self.clamped = norm < eps
        self.norm = np.maximum(norm, eps)
        self.out = x / self.norm
        self.axis = axis
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        projected = np.where(self.clamped, grad, grad - self.out * inner)
        return (projected / self.norm,)


class BatchNorm(Function):
    """Batch normalization over every axis but the channel axis (1).

    In training mode the batch statistics are used and the running
    statistics passed in are updated in place; in eval mode the running
    statistics are used and nothing is mutated.
    """

    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = True,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ) -> np.ndarray:
        if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
            raise ShapeError(f"batchnorm: input {x.shape} does not match {gamma.shape[0]} features")
        self.axes = (0,) if x.ndim == 2 else (0, 2, 3)
        param_shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        self.gamma = gamma.reshape(param_shape)
        self.training = training
        if training:
            mean = x.mean(axis=self.axes, keepdims=True)
            var = x.var(axis=self.axes, keepdims=True)
            if running_mean is not None and running_var is not None:
                count = x.size // x.shape[1]
                unbiased = var.reshape(-1) * count / max(count - 1, 1)
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean.reshape(-1)
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            if running_mean is None or running_var is None:
                raise ValueError("batchnorm in eval mode needs running statistics")
            mean = running_mean.reshape(param_shape)
            var = running_var.reshape(param_shape)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        return (self.gamma * self.x_hat + beta.reshape(param_shape)).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_gamma = (grad * self.x_hat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        d_hat = grad * self.gamma
        if not self.training:
            return d_hat * self.inv_std, grad_gamma, grad_beta
        count = grad.size // grad.shape[1]
        grad_x = (
            self.inv_std
            / count
            * (
                count * d_hat
                - d_hat.sum(axis=self.axes, keepdims=True)
                - self.x_hat * (d_hat * self.x_hat).sum(axis=self.axes, keepdims=True)
            )
        )
        return grad_x, grad_gamma, grad_beta


class ScaleGradient(Function):
    """Identity forward; multiplies the incoming gradient by ``scale``."""

    def forward(self, x: np.ndarray, scale: float = 1.0) -> np.ndarray:
        self.scale = scale
        return x

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.scale,)


# --- functional helpers ---


def tensor(data: Any, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    return MatMul.apply(x, y)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return Conv2d.apply(x, weight, stride=stride, padding=padding)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return L2Normalize.apply(x, axis=axis, eps=eps)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def scale_gradient(x: Tensor, scale: float) -> Tensor:
    return ScaleGradient.apply(x, scale=scale)


def stop_gradient(x: Tensor) -> Tensor:
    """sg(x): same values, no path back to ``x``."""
    return Tensor(x.data, requires_grad=False)


def lstm_cell(
    x: Tensor, hidden: Tensor, cell: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor
) -> Tuple[Tensor, Tensor]:
    """One gated recurrent (LSTM) step; gate order input, forget, candidate, output."""
    size = hidden.shape[1]
    gates = x @ w_input + hidden @ w_hidden + bias
    input_gate = gates[:, 0:size].sigmoid()
    forget_gate = gates[:, size : 2 * size].sigmoid()
    candidate = gates[:, 2 * size : 3 * size].tanh()
    output_gate = gates[:, 3 * size : 4 * size].sigmoid()
    new_cell = forget_gate * cell + input_gate * candidate
    new_hidden = output_gate * new_cell.tanh()
    return new_hidden, new_cell


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    Raises:
        ShapeError: If ``loss`` is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. The
    relative error for one input is ||analytic - numeric|| / (||analytic|| +
    ||numeric||), and 0 when both vanish.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            numeric_flat = numeric.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = float(fn().data)
                flat[i] = original - eps
                minus = float(fn().data)
                flat[i] = original
                numeric_flat[i] = (plus - minus) / (2 * eps)
            denom = np.linalg.norm(grad) + np.linalg.norm(numeric)
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
    for t in inputs:
        t.grad = None
    return worst


def check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} contains non-finite values")
