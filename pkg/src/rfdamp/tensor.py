"""Dense float32 tensor with an optional gradient buffer."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError

DTYPE = np.float32


class Tensor:
    """Row-major float32 array plus a same-shaped gradient buffer.

    Parameters and buffers of every layer are ``Tensor`` objects; activations
    travel between layers as plain ndarrays.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=DTYPE), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        g = g.astype(DTYPE, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def check_finite(self, name: str = "tensor") -> None:
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in {name}")
        if self.grad is not None and not np.isfinite(self.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name}")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_array(x) -> np.ndarray:
    """Unwrap a ``Tensor`` or pass an ndarray through unchanged."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)
