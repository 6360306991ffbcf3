"""Parameter containers and the small layer set the networks are built from."""

from typing import Any, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from effzero.tensorcore import Tensor, batch_norm, conv2d, lstm_cell


class Parameter(Tensor):
    """A trainable leaf tensor with its persistent momentum buffer."""

    def __init__(self, data: Any, name: Optional[str] = None):
        super().__init__(np.array(data), requires_grad=True, name=name)
        self.momentum_buffer = np.zeros_like(self.data)


class Module:
    """Base class: parameters, buffers and submodules are discovered from attributes."""

    training: bool = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found: List[Tuple[str, Parameter]] = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                found.append((name, value))
            else:
                found.extend(value.named_parameters(prefix=f"{name}."))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        found: List[Tuple[str, np.ndarray]] = []
        for name in getattr(self, "buffer_names", ()):
            found.append((f"{prefix}{name}", getattr(self, name)))
        for key, value in self._children():
            if isinstance(value, Module):
                found.extend(value.named_buffers(prefix=f"{prefix}{key}."))
        return found

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = x @ W + b with W of shape (in, out), uniform(+-1/sqrt(in)) init."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        zero_init: bool = False,
    ):
        bound = 1.0 / np.sqrt(in_features)
        if zero_init:
            weight = np.zeros((in_features, out_features), dtype=dtype)
            bias = np.zeros(out_features, dtype=dtype)
        else:
            weight = rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype)
            bias = rng.uniform(-bound, bound, out_features).astype(dtype)
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype: Any = np.float32,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 1,
    ):
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.uniform(-bound, bound, shape).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels).astype(dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, dtype: Any = np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(num_features, dtype=dtype))
        self.beta = Parameter(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class LSTMCell(Module):
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype: Any = np.float32):
        bound = 1.0 / np.sqrt(hidden_size)
        self.hidden_size = hidden_size
        self.w_input = Parameter(rng.uniform(-bound, bound, (input_size, 4 * hidden_size)).astype(dtype))
        self.w_hidden = Parameter(rng.uniform(-bound, bound, (hidden_size, 4 * hidden_size)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, 4 * hidden_size).astype(dtype))

    def forward(self, x: Tensor, hidden: Tensor, cell: Tensor) -> Tuple[Tensor, Tensor]:
        return lstm_cell(x, hidden, cell, self.w_input, self.w_hidden, self.bias)


class MLP(Module):
    """Linear layers with BN + ReLU between them; the last layer is left raw.

    ``zero_init_last`` zeroes the final weights and bias, ``activate_last``
    adds BN + ReLU after the final layer as well.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        dtype: Any = np.float32,
        zero_init_last: bool = False,
        activate_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ValueError(f"MLP needs at least input and output sizes, got {list(sizes)}")
        count = len(sizes) - 1
        self.linears = [
            Linear(sizes[i], sizes[i + 1], rng, dtype, zero_init=zero_init_last and i == count - 1)
            for i in range(count)
        ]
        norm_count = count if activate_last else count - 1
        self.norms = [BatchNorm(sizes[i + 1], dtype) for i in range(norm_count)]

    def forward(self, x: Tensor) -> Tensor:
        for i, linear in enumerate(self.linears):
            x = linear(x)
            if i < len(self.norms):
                x = self.norms[i](x).relu()
        return x


class ConvResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dtype: Any = np.float32):
        self.conv1 = Conv2d(channels, channels, rng, dtype)
        self.bn1 = BatchNorm(channels, dtype)
        self.conv2 = Conv2d(channels, channels, rng, dtype)
        self.bn2 = BatchNorm(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        return (out + x).relu()
