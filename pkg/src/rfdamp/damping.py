"""Frequency damping of convolution filters.

A constant matrix shaped like the kernel is multiplied element-wise into the
weights before every convolution. It is 1 at the kernel centre and decays
linearly to ``lam`` at the outermost taps of the damped axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import DTYPE

AXES = ("frequency", "time", "both")


@dataclass(frozen=True)
class DampingSpec:
    lam: float = 0.1
    axis: str = "frequency"
    enabled: bool = True

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 < self.lam <= 1.0:
            errs.append(f"damping.lambda must lie in (0, 1], got {self.lam}")
        if self.axis not in AXES:
            errs.append(f"damping.axis must be one of {AXES}, got {self.axis!r}")
        return errs


@dataclass(frozen=True, eq=False)
class DampingMatrix:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def linear_profile(k: int, lam: float) -> np.ndarray:
    """1 at the centre, falling linearly to ``lam`` at both ends."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"damping needs an odd kernel size, got {k}")
    half = (k - 1) // 2
    if half == 0:
        return np.ones(1, dtype=np.float64)
    d = np.abs(np.arange(k) - half)
    return 1.0 - (1.0 - lam) * d / half


def build_damping_matrix(k_t: int, k_f: int, spec: DampingSpec) -> DampingMatrix:
    errs = spec.validate()
    if errs:
        raise ConfigError(errs)
    pt = np.ones(k_t)
    pf = np.ones(k_f)
    if spec.enabled and spec.axis in ("time", "both"):
        pt = linear_profile(k_t, spec.lam)
    if spec.enabled and spec.axis in ("frequency", "both"):
        pf = linear_profile(k_f, spec.lam)
    if k_t % 2 == 0 or k_f % 2 == 0:
        raise ConfigError(f"damping needs odd kernel sizes, got {(k_t, k_f)}")
    return DampingMatrix(np.outer(pt, pf).astype(DTYPE))


def damped_conv2d(x, layer, C: DampingMatrix) -> np.ndarray:
    """``(W * C) (*) x + B`` for a :class:`~rfdamp.layers.ConvLayer` and an explicit ``C``."""
    if tuple(C.values.shape) != tuple(layer.weight.shape[2:]):
        raise ShapeError(
            f"damping matrix shape {C.values.shape} does not match kernel shape {layer.weight.shape[2:]}"
        )
    b = layer.bias.data if layer.bias is not None else None
    return ops.conv2d(x, layer.weight.data * C.values, b, layer.stride, layer.padding)
