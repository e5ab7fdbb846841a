"""Theoretical receptive-field arithmetic and the rho -> kernel mapping."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

RHO_MIN, RHO_MAX = 0, 12


@dataclass(frozen=True)
class LayerGeom:
    """Spatial geometry of one layer on the main path.

    ``kind`` is ``"conv"`` (odd kernels only) or ``"pool"``. ``padding`` of
    ``None`` means "same" padding for convs and none for pools.
    """

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    kind: str = "conv"
    padding: tuple[int, int] | None = None

    def resolved_padding(self) -> tuple[int, int]:
        if self.padding is not None:
            return self.padding
        if self.kind == "pool":
            return (0, 0)
        return ((self.kernel[0] - 1) // 2, (self.kernel[1] - 1) // 2)

    def validate(self) -> list[str]:
        errs = []
        for k in self.kernel:
            if k < 1:
                errs.append(f"kernel {self.kernel} must be >= 1")
            elif self.kind == "conv" and k % 2 == 0:
                errs.append(f"conv kernel {self.kernel} must be odd")
        if any(s < 1 for s in self.stride):
            errs.append(f"stride {self.stride} must be >= 1")
        if self.kind not in ("conv", "pool"):
            errs.append(f"unknown layer kind {self.kind!r}")
        return errs


@dataclass(frozen=True)
class RFResult:
    """Per-axis receptive field (in input pixels) and cumulative stride.

    ``start_t``/``start_f`` give the input coordinate of the first pixel seen
    by output unit 0, so unit ``u`` covers ``[start + u*jump, start + u*jump + rf - 1]``.
    """

    rf_t: int
    rf_f: int
    jump_t: int
    jump_f: int
    start_t: int = 0
    start_f: int = 0

    def span(self, unit_t: int, unit_f: int) -> tuple[tuple[int, int], tuple[int, int]]:
        t0 = self.start_t + unit_t * self.jump_t
        f0 = self.start_f + unit_f * self.jump_f
        return (t0, t0 + self.rf_t - 1), (f0, f0 + self.rf_f - 1)


def max_rf(layers) -> RFResult:
    """Compose RF_n = RF_{n-1} + (k_n - 1) * J_{n-1}, J_n = J_{n-1} * s_n per axis."""
    layers = list(layers)
    if not layers:
        raise ConfigError("max_rf needs at least one layer")
    errs = [f"layer {i}: {e}" for i, g in enumerate(layers) for e in g.validate()]
    if errs:
        raise ConfigError(errs)
    rf, jump, start = [1, 1], [1, 1], [0, 0]
    for g in layers:
        pad = g.resolved_padding()
        for a in (0, 1):
            start[a] -= pad[a] * jump[a]
            rf[a] += (g.kernel[a] - 1) * jump[a]
            jump[a] *= g.stride[a]
    return RFResult(rf[0], rf[1], jump[0], jump[1], start[0], start[1])


def rf_profile(layers) -> list[RFResult]:
    """RF after each prefix of ``layers``."""
    layers = list(layers)
    return [max_rf(layers[: i + 1]) for i in range(len(layers))]


def rho_to_kernels(rho: int, num_blocks: int) -> list[tuple[int, int]]:
    """Kernel size of (conv1, conv2) for each residual block.

    The first ``rho`` block convolutions (in network order) are 3x3, all later
    ones 1x1. Together with the two always-spatial stem convolutions this makes
    ``rho + 2`` spatial layers.
    """
    if isinstance(rho, bool) or not isinstance(rho, int) or not RHO_MIN <= rho <= RHO_MAX:
        raise ConfigError(f"rho must be an integer in {RHO_MIN}..{RHO_MAX}, got {rho!r}")
    if num_blocks < 1:
        raise ConfigError(f"num_blocks must be >= 1, got {num_blocks}")
    ks = [3 if i < rho else 1 for i in range(2 * num_blocks)]
    return [(ks[2 * b], ks[2 * b + 1]) for b in range(num_blocks)]
