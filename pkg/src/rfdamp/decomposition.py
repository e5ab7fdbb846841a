"""Decomposed convolutions: 1x1 reduce -> kxk core -> 1x1 expand.

The block is trained from scratch and has no normalization or non-linearity
between its three convolutions. The original layer's stride sits on the core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .damping import DampingMatrix
from .errors import ConfigError, ShapeError
from .layers import ConvLayer, Module


@dataclass(frozen=True)
class DecompSpec:
    Z: int = 4
    enabled: bool = True
    apply_to: str = "blocks"  # "blocks": residual-block convs with k > 1; "all": stem too

    def validate(self) -> list[str]:
        errs = []
        if not isinstance(self.Z, int) or self.Z < 1:
            errs.append(f"decomp.Z must be a positive integer, got {self.Z!r}")
        if self.apply_to not in ("blocks", "all"):
            errs.append(f"decomp.apply_to must be 'blocks' or 'all', got {self.apply_to!r}")
        return errs


class DecomposedBlock(Module):
    def __init__(self, reduce: ConvLayer, core: ConvLayer, expand: ConvLayer):
        self.reduce = reduce
        self.core = core
        self.expand = expand

    @property
    def in_channels(self) -> int:
        return self.reduce.in_channels

    @property
    def out_channels(self) -> int:
        return self.expand.out_channels

    @property
    def kernel(self) -> tuple[int, int]:
        return self.core.kernel

    @property
    def stride(self) -> tuple[int, int]:
        return self.core.stride

    @property
    def padding(self) -> tuple[int, int]:
        return self.core.padding

    @property
    def damping(self):
        return self.core.damping

    def set_damping(self, damping) -> None:
        self.core.set_damping(damping)

    def weight_count(self) -> int:
        return self.reduce.weight.size + self.core.weight.size + self.expand.weight.size

    @property
    def parameter_count(self) -> int:
        return self.reduce.parameter_count + self.core.parameter_count + self.expand.parameter_count

    def forward(self, x):
        return self.expand.forward(self.core.forward(self.reduce.forward(x)))

    def backward(self, grad):
        return self.reduce.backward(self.core.backward(self.expand.backward(grad)))


def _check_divisible(c_out: int, Z: int, name: str) -> int:
    if Z < 1:
        raise ConfigError(f"{name}: compression factor Z must be >= 1, got {Z}")
    if c_out % Z:
        raise ConfigError(f"{name}: C_out={c_out} is not divisible by Z={Z}")
    return c_out // Z


def decompose_layer(c_in: int, c_out: int, k, Z: int, stride=1, padding=None, bias: bool = False,
                    damping=None, name: str = "layer") -> DecomposedBlock:
    """Build the three-conv replacement for a ``c_in -> c_out`` kxk convolution.

    Shapes: ``[c_out/Z, c_in, 1, 1]``, ``[c_out/Z, c_out/Z, k, k]``,
    ``[c_out, c_out/Z, 1, 1]``. Weights are left at zero; initialize them with
    :func:`rfdamp.model.init_weights`.
    """
    mid = _check_divisible(c_out, Z, name)
    reduce = ConvLayer(c_in, mid, 1, bias=bias)
    core = ConvLayer(mid, mid, k, stride=stride, padding=padding, bias=bias, damping=damping)
    expand = ConvLayer(mid, c_out, 1, bias=bias)
    return DecomposedBlock(reduce, core, expand)


def decomp_param_count(c_in: int, c_out: int, k: int, Z: int, include_bias: bool = False) -> int:
    mid = _check_divisible(c_out, Z, "decomp_param_count")
    n = c_in * mid + mid * mid * k * k + mid * c_out
    if include_bias:
        n += mid + mid + c_out
    return n


def conv_param_count(c_in: int, c_out: int, k: int, include_bias: bool = False) -> int:
    return c_in * c_out * k * k + (c_out if include_bias else 0)


def damped_decomposed_forward(x, block: DecomposedBlock, C: DampingMatrix | None) -> np.ndarray:
    """reduce -> core with ``C`` applied -> expand, using ``C`` instead of the core's own damping."""
    if C is not None and tuple(C.values.shape) != block.core.kernel:
        raise ShapeError(f"damping matrix shape {C.values.shape} does not match core kernel {block.core.kernel}")

    def plain(layer, inp, w):
        b = layer.bias.data if layer.bias is not None else None
        return ops.conv2d(inp, w, b, layer.stride, layer.padding)

    h = plain(block.reduce, x, block.reduce.weight.data)
    w = block.core.weight.data if C is None else block.core.weight.data * C.values
    h = plain(block.core, h, w)
    return plain(block.expand, h, block.expand.weight.data)
