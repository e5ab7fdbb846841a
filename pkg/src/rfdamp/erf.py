"""Effective receptive field measured from input gradients.

A unit gradient is injected at the spatial centre of the last feature map
(all channels), back-propagated to the input, and the absolute input gradient
is averaged over batch and input channels.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE

DEFAULT_FRACTION = 0.95
DEFAULT_BATCH = 16


@dataclass
class ErfReport:
    energy_map: np.ndarray
    width_t: int
    width_f: int
    center: tuple[int, int]
    rf_box: tuple[tuple[int, int], tuple[int, int]]
    clipped: bool
    fraction: float = DEFAULT_FRACTION

    def support(self, tol: float = 0.0) -> tuple[tuple[int, int], tuple[int, int]] | None:
        """Bounding box ``((t0, t1), (f0, f1))`` of entries above ``tol``."""
        t_idx = np.flatnonzero((self.energy_map > tol).any(axis=1))
        f_idx = np.flatnonzero((self.energy_map > tol).any(axis=0))
        if t_idx.size == 0:
            return None
        return (int(t_idx[0]), int(t_idx[-1])), (int(f_idx[0]), int(f_idx[-1]))

    def normalized(self) -> np.ndarray:
        total = self.energy_map.sum()
        return self.energy_map / total if total > 0 else self.energy_map

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(
            [[f"{v:.8g}" for v in row] for row in self.energy_map])
        return buf.getvalue()

    def summary_line(self) -> str:
        return (f"erf width_t={self.width_t} width_f={self.width_f} fraction={self.fraction} "
                f"center={self.center[0]},{self.center[1]} clipped={int(self.clipped)}")


def energy_width(profile: np.ndarray, center: int, fraction: float = DEFAULT_FRACTION) -> int:
    """Smallest symmetric window around ``center`` holding ``fraction`` of the profile's mass.

    The window is clipped at the array ends; the returned width counts the
    clipped window.
    """
    total = float(profile.sum())
    if total <= 0:
        return 0
    n = profile.size
    csum = np.concatenate([[0.0], np.cumsum(profile, dtype=np.float64)])
    for r in range(n):
        lo, hi = max(center - r, 0), min(center + r, n - 1)
        if csum[hi + 1] - csum[lo] >= fraction * total * (1 - 1e-12):
            return hi - lo + 1
    return n


def measure_erf(network, input_batch: np.ndarray, fraction: float = DEFAULT_FRACTION,
                grad_scale: float = 1.0) -> ErfReport:
    """Measure the ERF of the central unit of ``network``'s last feature map.

    The network is probed in eval mode (batchnorm uses running statistics) and
    its training flag is restored afterwards.
    """
    x = np.ascontiguousarray(input_batch, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"ERF input batch must be [N, C, T, F], got shape {x.shape}")
    was_training = network.training
    network.eval()
    try:
        feats = network.forward_features(x)
        ct, cf = feats.shape[2] // 2, feats.shape[3] // 2
        g = np.zeros_like(feats)
        g[:, :, ct, cf] = grad_scale
        gx = network.backward_features(g)
    finally:
        network.train(was_training)
    energy = np.abs(gx).mean(axis=(0, 1))

    rf = network.rf()
    (t0, t1), (f0, f1) = rf.span(ct, cf)
    T, F = energy.shape
    clipped = t0 < 0 or f0 < 0 or t1 > T - 1 or f1 > F - 1
    if clipped:
        warnings.warn(f"theoretical RF box t[{t0},{t1}] f[{f0},{f1}] exceeds input {T}x{F}; "
                      "ERF measurement is clipped", RuntimeWarning, stacklevel=2)
    peak = np.unravel_index(int(np.argmax(energy)), energy.shape)
    width_t = energy_width(energy.sum(axis=1), int(peak[0]), fraction)
    width_f = energy_width(energy.sum(axis=0), int(peak[1]), fraction)
    return ErfReport(energy, width_t, width_f, (int(peak[0]), int(peak[1])), ((t0, t1), (f0, f1)),
                     clipped, fraction)


def probe_input(shape, seed: int = 0, batch: int = DEFAULT_BATCH) -> np.ndarray:
    """Random-normal probe batch ``[batch, *shape]``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, *shape)).astype(DTYPE)
