"""Residual network construction and parameter accounting.

Default geometry: a 5x5/2 and a 3x3/2 stem convolution, then 7 residual
blocks in stages of (3, 3, 1) blocks with widths (1x, 2x, 4x) base channels
and a 2x2 max-pool after the first stage. ``rho`` picks how many block
convolutions are 3x3 (see :func:`rfdamp.rf.rho_to_kernels`).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .damping import DampingSpec, build_damping_matrix
from .decomposition import DecomposedBlock, DecompSpec, decompose_layer
from .errors import ConfigError, ShapeError
from .layers import (BatchNorm2d, ConvLayer, GlobalAvgPool, Linear, MaxPool2d, Module, ReLU)
from .rf import RHO_MAX, RHO_MIN, LayerGeom, RFResult, max_rf, rho_to_kernels


@dataclass(frozen=True)
class ArchSpec:
    base_channels: int = 128
    rho: int = 7
    stages: tuple[int, ...] = (3, 3, 1)
    pool_after: tuple[bool, ...] = (True, False)
    stem: tuple[tuple[int, int], ...] = ((5, 2), (3, 2))  # (kernel, stride) per stem conv
    in_channels: int = 2
    num_classes: int = 10
    damping: DampingSpec = field(default_factory=lambda: DampingSpec(enabled=False))
    decomp: DecompSpec | None = None

    @property
    def num_blocks(self) -> int:
        return sum(self.stages)

    def stage_widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(len(self.stages))]

    def decomp_active(self) -> bool:
        return self.decomp is not None and self.decomp.enabled

    def validate(self) -> list[str]:
        errs = []
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            errs.append(f"base_channels must be a positive integer, got {self.base_channels!r}")
        if isinstance(self.rho, bool) or not isinstance(self.rho, int) or not RHO_MIN <= self.rho <= RHO_MAX:
            errs.append(f"rho must be an integer in {RHO_MIN}..{RHO_MAX}, got {self.rho!r}")
        if not self.stages or any((not isinstance(s, int)) or s < 1 for s in self.stages):
            errs.append(f"stages must be a non-empty list of positive block counts, got {self.stages!r}")
        elif len(self.pool_after) != len(self.stages) - 1:
            errs.append(f"pool_after needs {len(self.stages) - 1} entries for {len(self.stages)} stages, "
                        f"got {len(self.pool_after)}")
        if not self.stem:
            errs.append("stem must contain at least one convolution")
        for i, (k, s) in enumerate(self.stem):
            if k < 1 or k % 2 == 0:
                errs.append(f"stem conv {i}: kernel must be odd and positive, got {k}")
            if s < 1:
                errs.append(f"stem conv {i}: stride must be >= 1, got {s}")
        if self.in_channels < 1:
            errs.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            errs.append(f"num_classes must be >= 2, got {self.num_classes}")
        errs += self.damping.validate()
        if self.decomp is not None:
            errs += self.decomp.validate()
            if not errs and self.decomp.enabled:
                for name, _, cout, k in _decomposable(self):
                    if cout % self.decomp.Z:
                        errs.append(f"{name}: C_out={cout} is not divisible by decomp.Z={self.decomp.Z}")
        return errs

    def check(self) -> "ArchSpec":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self


def _block_layout(spec: ArchSpec):
    """Yield (stage, block_index, c_in, c_out, (k1, k2)) for each residual block."""
    kernels = rho_to_kernels(spec.rho, spec.num_blocks)
    widths = spec.stage_widths()
    cin = spec.base_channels
    b = 0
    for s, nb in enumerate(spec.stages):
        for _ in range(nb):
            yield s, b, cin, widths[s], kernels[b]
            cin = widths[s]
            b += 1


def _decomposable(spec: ArchSpec):
    """(name, c_in, c_out, k) of every conv the decomposition would replace."""
    out = []
    if spec.decomp is not None and spec.decomp.apply_to == "all":
        cin = spec.in_channels
        for i, (k, _) in enumerate(spec.stem):
            if k > 1:
                out.append((f"stem.{i}.conv", cin, spec.base_channels, k))
            cin = spec.base_channels
    for _, b, cin, cout, (k1, k2) in _block_layout(spec):
        if k1 > 1:
            out.append((f"blocks.{b}.conv1", cin, cout, k1))
        if k2 > 1:
            out.append((f"blocks.{b}.conv2", cout, cout, k2))
    return out


def arch_geometry(spec: ArchSpec) -> list[LayerGeom]:
    """Main-path geometry straight from the spec, without building anything."""
    geo = [LayerGeom((k, k), (s, s)) for k, s in spec.stem]
    n_stages = len(spec.stages)
    last_stage = 0
    for s, _, _, _, (k1, k2) in _block_layout(spec):
        if s != last_stage:
            if spec.pool_after[last_stage]:
                geo.append(LayerGeom((2, 2), (2, 2), kind="pool"))
            last_stage = s
        geo.append(LayerGeom((k1, k1)))
        geo.append(LayerGeom((k2, k2)))
    assert last_stage == n_stages - 1
    return geo


def _conv(cin, cout, k, stride, spec: ArchSpec, decompose: bool, name: str):
    damping = build_damping_matrix(k, k, spec.damping) if spec.damping.enabled and k > 1 else None
    if decompose and k > 1:
        return decompose_layer(cin, cout, k, spec.decomp.Z, stride=stride, damping=damping, name=name)
    return ConvLayer(cin, cout, k, stride=stride, bias=False, damping=damping)


class StemUnit(Module):
    def __init__(self, conv, channels: int):
        self.conv = conv
        self.bn = BatchNorm2d(channels)
        self.relu = ReLU()

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, grad):
        return self.conv.backward(self.bn.backward(self.relu.backward(grad)))


class ResidualBlock(Module):
    """conv-bn-relu-conv-bn plus shortcut, then relu.

    The shortcut is a 1x1 conv + bn when the channel count changes.
    """

    def __init__(self, conv1, conv2, c_in: int, c_out: int):
        self.conv1 = conv1
        self.bn1 = BatchNorm2d(c_out)
        self.relu1 = ReLU()
        self.conv2 = conv2
        self.bn2 = BatchNorm2d(c_out)
        if c_in != c_out:
            self.shortcut = ConvLayer(c_in, c_out, 1, bias=False)
            self.shortcut_bn = BatchNorm2d(c_out)
        else:
            self.shortcut = None
            self.shortcut_bn = None
        self.relu_out = ReLU()

    def forward(self, x):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        s = x if self.shortcut is None else self.shortcut_bn.forward(self.shortcut.forward(x))
        return self.relu_out.forward(h + s)

    def backward(self, grad):
        g = self.relu_out.backward(grad)
        gh = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(g)))))
        gs = g if self.shortcut is None else self.shortcut.backward(self.shortcut_bn.backward(g))
        return gh + gs


class Network(Module):
    def __init__(self, spec: ArchSpec):
        self.spec = spec
        decomp_stem = spec.decomp_active() and spec.decomp.apply_to == "all"
        decomp_blocks = spec.decomp_active()
        stem = []
        cin = spec.in_channels
        for i, (k, s) in enumerate(spec.stem):
            stem.append(StemUnit(_conv(cin, spec.base_channels, k, s, spec, decomp_stem, f"stem.{i}.conv"),
                                 spec.base_channels))
            cin = spec.base_channels
        self.stem = stem
        blocks = []
        # pools[b] is the pool applied before block b (or None)
        pools = []
        last_stage = 0
        for s, b, c_in, c_out, (k1, k2) in _block_layout(spec):
            pool = None
            if s != last_stage:
                if spec.pool_after[last_stage]:
                    pool = MaxPool2d(2)
                last_stage = s
            pools.append(pool)
            blocks.append(ResidualBlock(
                _conv(c_in, c_out, k1, 1, spec, decomp_blocks, f"blocks.{b}.conv1"),
                _conv(c_out, c_out, k2, 1, spec, decomp_blocks, f"blocks.{b}.conv2"),
                c_in, c_out))
        self.blocks = blocks
        self.pools = [p if p is not None else _Identity() for p in pools]
        self.gap = GlobalAvgPool()
        self.classifier = Linear(spec.stage_widths()[-1], spec.num_classes)

    def forward_features(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"network expects input [N, {self.spec.in_channels}, T, F], got shape {x.shape}")
        for unit in self.stem:
            x = unit.forward(x)
        for pool, block in zip(self.pools, self.blocks):
            x = block.forward(pool.forward(x))
        return x

    def backward_features(self, grad: np.ndarray) -> np.ndarray:
        for pool, block in zip(reversed(self.pools), reversed(self.blocks)):
            grad = pool.backward(block.backward(grad))
        for unit in reversed(self.stem):
            grad = unit.backward(grad)
        return grad

    def forward(self, x):
        return self.classifier.forward(self.gap.forward(self.forward_features(x)))

    def backward(self, grad):
        return self.backward_features(self.gap.backward(self.classifier.backward(grad)))

    def set_linear(self, flag: bool = True) -> "Network":
        """Make every ReLU an identity and every max-pool an average-pool."""
        for _, m in self.named_modules():
            if isinstance(m, (ReLU, MaxPool2d)):
                m.linear = flag
        return self

    def conv_layers(self):
        return [(n, m) for n, m in self.named_modules() if isinstance(m, ConvLayer)]

    def geometry(self) -> list[LayerGeom]:
        """Main-path geometry read back from the constructed layers."""
        def conv_geo(c):
            if isinstance(c, DecomposedBlock):
                return [LayerGeom((1, 1)), LayerGeom(c.core.kernel, c.core.stride, padding=c.core.padding),
                        LayerGeom((1, 1))]
            return [LayerGeom(c.kernel, c.stride, padding=c.padding)]

        geo = []
        for unit in self.stem:
            geo += conv_geo(unit.conv)
        for pool, block in zip(self.pools, self.blocks):
            if isinstance(pool, MaxPool2d):
                geo.append(LayerGeom((pool.kernel, pool.kernel), (pool.kernel, pool.kernel), kind="pool"))
            geo += conv_geo(block.conv1) + conv_geo(block.conv2)
        return geo

    def rf(self) -> RFResult:
        return max_rf(self.geometry())


class _Identity(Module):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


def build(spec: ArchSpec, seed: int | None = 0) -> Network:
    """Validate ``spec`` and construct the network; weights are initialized from ``seed``."""
    spec.check()
    net = Network(spec)
    if seed is not None:
        init_weights(net, seed)
    return net


def init_weights(network: Module, seed: int) -> Module:
    """He-normal convs (std sqrt(2/fan_in)), normal linear (std sqrt(1/fan_in)), unit BN."""
    rng = np.random.default_rng(seed)
    for _, m in network.named_modules():
        if isinstance(m, ConvLayer):
            fan_in = m.in_channels * m.kernel[0] * m.kernel[1]
            m.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), m.weight.shape)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, Linear):
            fan_in = m.weight.shape[1]
            m.weight.data[...] = rng.normal(0.0, np.sqrt(1.0 / fan_in), m.weight.shape)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.weight.data[...] = 1
            m.bias.data[...] = 0
            m.running_mean.data[...] = 0
            m.running_var.data[...] = 1
    return network


@dataclass
class LayerRow:
    name: str
    shape: tuple[int, ...]
    params: int
    nonzero: int
    prunable: bool


@dataclass
class ModelSummary:
    total_params: int
    nonzero_params: int
    rf: RFResult
    layers: list[LayerRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "shape", "params", "nonzero", "prunable"])
        for r in self.layers:
            w.writerow([r.name, "x".join(map(str, r.shape)), r.params, r.nonzero, int(r.prunable)])
        w.writerow(["TOTAL", "", self.total_params, self.nonzero_params, ""])
        return buf.getvalue()

    def format_table(self) -> str:
        width = max([len(r.name) for r in self.layers] + [5])
        lines = [f"{'name':<{width}}  {'shape':>18}  {'params':>10}  {'nonzero':>10}"]
        for r in self.layers:
            shape = "x".join(map(str, r.shape))
            lines.append(f"{r.name:<{width}}  {shape:>18}  {r.params:>10}  {r.nonzero:>10}")
        lines.append(f"{'TOTAL':<{width}}  {'':>18}  {self.total_params:>10}  {self.nonzero_params:>10}")
        lines.append(f"max RF (time x freq): {self.rf.rf_t} x {self.rf.rf_f}")
        return "\n".join(lines)


def summarize(network: Network) -> ModelSummary:
    """Exact parameter counts by tensor enumeration.

    Only prunable weights can be "zero"; biases and batchnorm parameters are
    always counted as non-zero.
    """
    prunable = {id(t) for _, t in network.named_prunable()}
    rows = []
    for name, p in network.named_parameters():
        is_prunable = id(p) in prunable
        nz = int(np.count_nonzero(p.data)) if is_prunable else p.size
        rows.append(LayerRow(name, tuple(p.shape), p.size, nz, is_prunable))
    total = sum(r.params for r in rows)
    nonzero = sum(r.nonzero for r in rows)
    return ModelSummary(total, nonzero, network.rf(), rows)


def count_params(spec: ArchSpec) -> int:
    return summarize(build(spec, seed=None)).total_params
