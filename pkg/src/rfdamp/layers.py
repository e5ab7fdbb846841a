"""Layer objects with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises :class:`StateError`.
Parameter gradients accumulate into ``Tensor.grad``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, StateError
from .tensor import DTYPE, Tensor


class Module:
    training: bool = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def _members(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            else:
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._members():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._members():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._members():
            if isinstance(value, Tensor) and not value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def named_prunable(self) -> Iterator[tuple[str, Tensor]]:
        """Weights eligible for magnitude pruning (conv and linear weights)."""
        for mname, m in self.named_modules():
            if isinstance(m, (ConvLayer, Linear)):
                yield (f"{mname}.weight" if mname else "weight"), m.weight

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _odd_pair(kernel, what: str) -> tuple[int, int]:
    kt, kf = ops._pair(kernel)
    bad = [k for k in (kt, kf) if k < 1 or k % 2 == 0]
    if bad:
        raise ConfigError(f"{what}: kernel sizes must be odd and positive, got {(kt, kf)}")
    return kt, kf


class ConvLayer(Module):
    """2-D convolution with optional bias and optional weight damping.

    When ``damping`` is set the effective weight is ``weight * damping.values``
    on every forward pass; the stored weight stays undamped.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel=3, stride=1, padding=None,
                 bias: bool = True, damping=None):
        kt, kf = _odd_pair(kernel, "ConvLayer")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kt, kf)
        self.stride = ops._pair(stride)
        self.padding = ((kt - 1) // 2, (kf - 1) // 2) if padding is None else ops._pair(padding)
        self.weight = Tensor.zeros((out_channels, in_channels, kt, kf), requires_grad=True)
        self.bias = Tensor.zeros((out_channels,), requires_grad=True) if bias else None
        self.damping = None
        if damping is not None:
            self.set_damping(damping)
        self._x = None
        self._cols = None

    def set_damping(self, damping) -> None:
        if damping is not None and tuple(damping.values.shape) != self.kernel:
            raise ConfigError(
                f"damping matrix shape {damping.values.shape} does not match kernel {self.kernel}"
            )
        self.damping = damping

    @property
    def parameter_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def effective_weight(self) -> np.ndarray:
        if self.damping is None:
            return self.weight.data
        return self.weight.data * self.damping.values

    def forward(self, x):
        self._x = x
        self._cols = ops.im2col(x, *self.kernel, self.stride, self.padding) if x.ndim == 4 else None
        b = self.bias.data if self.bias is not None else None
        return ops.conv2d(x, self.effective_weight(), b, self.stride, self.padding, cols=self._cols)

    def backward(self, grad):
        if self._x is None:
            raise StateError("ConvLayer.backward called without a saved input (run forward first)")
        gx, gw, gb = ops.conv2d_grad(grad, self._x, self.effective_weight(), self.stride, self.padding,
                                     with_bias=self.bias is not None, cols=self._cols)
        if self.damping is not None:
            gw = gw * self.damping.values
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx

    def __repr__(self):
        return (f"ConvLayer({self.in_channels}, {self.out_channels}, kernel={self.kernel}, "
                f"stride={self.stride}, damped={self.damping is not None})")


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        self.weight = Tensor.ones((channels,), requires_grad=True)
        self.bias = Tensor.zeros((channels,), requires_grad=True)
        self.running_mean = Tensor.zeros((channels,))
        self.running_var = Tensor.ones((channels,))
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x):
        out, self._cache = ops.batchnorm2d(x, self.weight.data, self.bias.data, self.running_mean.data,
                                           self.running_var.data, self.training, self.momentum, self.eps)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise StateError("BatchNorm2d.backward called before forward")
        gx, gg, gb = ops.batchnorm2d_grad(grad, self._cache)
        self.weight.accumulate(gg)
        self.bias.accumulate(gb)
        return gx


class ReLU(Module):
    """Rectifier; passes values through unchanged while ``linear`` is set."""

    def __init__(self):
        self.linear = False
        self._x = None

    def forward(self, x):
        self._x = x
        return x if self.linear else ops.relu(x)

    def backward(self, grad):
        if self._x is None:
            raise StateError("ReLU.backward called before forward")
        return grad if self.linear else ops.relu_grad(grad, self._x)


class MaxPool2d(Module):
    """k×k max pooling; averages instead while ``linear`` is set."""

    def __init__(self, kernel: int = 2):
        self.kernel = kernel
        self.linear = False
        self._x = None

    def forward(self, x):
        self._x = x
        if self.linear:
            return ops.avg_pool2d(x, self.kernel)
        return ops.max_pool2d(x, self.kernel)

    def backward(self, grad):
        if self._x is None:
            raise StateError("MaxPool2d.backward called before forward")
        if self.linear:
            return ops.avg_pool2d_grad(grad, self._x, self.kernel)
        return ops.max_pool2d_grad(grad, self._x, self.kernel)


class GlobalAvgPool(Module):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return ops.global_avg_pool(x)

    def backward(self, grad):
        if self._shape is None:
            raise StateError("GlobalAvgPool.backward called before forward")
        return ops.global_avg_pool_grad(grad, self._shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.weight = Tensor.zeros((out_features, in_features), requires_grad=True)
        self.bias = Tensor.zeros((out_features,), requires_grad=True) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.linear(x, self.weight.data, self.bias.data if self.bias is not None else None)

    def backward(self, grad):
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        gx, gw, gb = ops.linear_grad(grad, self._x, self.weight.data, self.bias is not None)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def conv2d_forward(x, layer: ConvLayer) -> np.ndarray:
    """Plain (undamped) forward of ``layer`` on ``x``."""
    b = layer.bias.data if layer.bias is not None else None
    return ops.conv2d(np.asarray(x, dtype=DTYPE) if not isinstance(x, np.ndarray) else x,
                      layer.weight.data, b, layer.stride, layer.padding)


def conv2d_backward(grad_out, saved_input, layer: ConvLayer):
    """``(grad_input, grad_weight, grad_bias)`` for a plain conv forward."""
    if saved_input is None:
        raise StateError("conv2d_backward requires the input saved from the forward pass")
    return ops.conv2d_grad(grad_out, saved_input, layer.weight.data, layer.stride, layer.padding,
                           with_bias=layer.bias is not None)
