"""Small layer containers with named parameters."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import ops
from .autograd import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor.  ``decay`` marks tensors that receive L2 regularization."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Parameter(_he(rng, (n_out, n_in), n_in, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype), decay=False) if bias else None

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class PReLU(Module):
    def __init__(self, channels: int, axis: int = -1, init: float = 0.25, dtype=np.float32):
        self.slope = Parameter(np.full(channels, init, dtype=dtype), decay=False)
        self.axis = axis

    def forward(self, x):
        return ops.prelu(x, self.slope, axis=self.axis)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return ops.dropout(x, self.rate, self.rng, self.training)


class _ConvBase(Module):
    _fn = None
    _transposed = False

    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, output_padding=0, dtype=np.float32):
        kernel = tuple(np.atleast_1d(kernel))
        k = int(np.prod(kernel))
        if self._transposed:
            shape, fan_in = (c_in, c_out) + kernel, c_in * k
        else:
            shape, fan_in = (c_out, c_in) + kernel, c_in * k
        self.weight = Parameter(_he(rng, shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), decay=False)
        self.stride, self.pad, self.output_padding = stride, pad, output_padding

    def forward(self, x):
        if self._transposed:
            return type(self)._fn(x, self.weight, self.bias, self.stride, self.pad, self.output_padding)
        return type(self)._fn(x, self.weight, self.bias, self.stride, self.pad)


class Conv3d(_ConvBase):
    _fn = staticmethod(ops.conv3d)


class ConvTranspose3d(_ConvBase):
    _fn = staticmethod(ops.conv3d_transposed)
    _transposed = True


class Conv1d(_ConvBase):
    _fn = staticmethod(ops.conv1d)


class ConvTranspose1d(_ConvBase):
    _fn = staticmethod(ops.conv1d_transposed)
    _transposed = True


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
