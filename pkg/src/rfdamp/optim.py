"""Momentum SGD and the learning-rate schedule used by the training harness."""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             buffers: dict | None = None) -> None:
    """In-place momentum SGD update.

    ``params`` is a list of ``(name, Tensor)`` pairs and ``grads`` the matching
    list of ndarrays (``None`` means no gradient this step). ``buffers`` holds
    the momentum state between calls, keyed by parameter name.

        v <- momentum * v + (g + weight_decay * p)
        p <- p - lr * v
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    buffers = {} if buffers is None else buffers
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        d = g if weight_decay == 0 else g + weight_decay * p.data
        if momentum:
            v = buffers.get(name)
            if v is None:
                v = buffers[name] = d.astype(p.data.dtype, copy=True)
            else:
                v *= momentum
                v += d
            d = v
        p.data -= np.float32(lr) * d


class SGD:
    """Stateful wrapper over :func:`sgd_step` for a named parameter list."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, [p.grad for _, p in self.params], self.lr, self.momentum,
                 self.weight_decay, self.buffers)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def lr_at(epoch: int, base_lr: float, epochs: int, warmup_epochs: int = 0,
          milestones=(0.5, 0.75), gamma: float = 0.1, step_frac: float = 0.0) -> float:
    """Linear warmup followed by step decay at fractional ``milestones``.

    ``step_frac`` in [0, 1) is the position inside the epoch, so warmup is
    smooth across steps.
    """
    pos = epoch + step_frac
    if warmup_epochs and pos < warmup_epochs:
        return base_lr * (pos + 1e-3) / warmup_epochs
    lr = base_lr
    for m in milestones:
        if epoch >= math.floor(m * epochs):
            lr *= gamma
    return lr
