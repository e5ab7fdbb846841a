"""Experiment configuration and its flat ``key = value`` text format.

Example::

    # comments start with '#'
    name = damped_r7
    seed = 0
    arch.base_channels = 128
    arch.rho = 7
    arch.stages = 3, 3, 1
    arch.stem = 5x2, 3x2          # kernel x stride per stem conv
    damping.enabled = true
    damping.lambda = 0.1
    decomp.enabled = false
    prune.target_nonzero = 400000
    optim.epochs = 120

Unknown keys are rejected. Lists are comma-separated; ``sweep.rho`` also
accepts ranges like ``3..12``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .damping import DampingSpec
from .decomposition import DecompSpec
from .errors import ConfigError
from .features import FeatureConfig
from .model import ArchSpec


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "manifest"
    manifest: str = ""
    n_per_class: int = 64
    test_per_class: int = 32
    difficulty: float = 0.5
    frames: int = 64
    bins: int = 64
    cue_extent: float = 4.0
    position_jitter: float = 1.0
    seed: int = -1  # -1: use the experiment seed


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 120
    batch_size: int = 32
    warmup_epochs: int = 2
    milestones: tuple[float, ...] = (0.5, 0.75)
    decay: float = 0.1


@dataclass(frozen=True)
class PruneConfig:
    enabled: bool = False
    target_nonzero: int = 0
    ramp_epochs: int = 100
    scope: str = "global"
    gamma: float = 0.0  # 0: derive from ramp_epochs


@dataclass(frozen=True)
class SweepConfig:
    rho: tuple[int, ...] = tuple(range(3, 13))
    variants: tuple[str, ...] = ("damped", "undamped")
    widths: tuple[int, ...] = ()
    seeds: tuple[int, ...] = ()
    jobs: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    arch: ArchSpec = field(default_factory=ArchSpec)
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs"
    strict: bool = False

    def data_seed(self) -> int:
        return self.seed if self.data.seed < 0 else self.data.seed

    def validate(self) -> list[str]:
        errs = list(self.arch.validate())
        errs += self.features.validate()
        d, o, p = self.data, self.optim, self.prune
        if d.source not in ("synthetic", "manifest"):
            errs.append(f"data.source must be 'synthetic' or 'manifest', got {d.source!r}")
        if d.source == "manifest" and not d.manifest:
            errs.append("data.manifest is required when data.source = manifest")
        if d.n_per_class < 1 or d.test_per_class < 1:
            errs.append("data.n_per_class and data.test_per_class must be >= 1")
        if not 0 <= d.difficulty <= 1:
            errs.append(f"data.difficulty must lie in [0, 1], got {d.difficulty}")
        if not 0 <= d.position_jitter <= 1:
            errs.append(f"data.position_jitter must lie in [0, 1], got {d.position_jitter}")
        if o.epochs < 0:
            errs.append(f"optim.epochs must be >= 0, got {o.epochs}")
        if o.batch_size < 1:
            errs.append(f"optim.batch_size must be >= 1, got {o.batch_size}")
        if o.lr < 0 or o.weight_decay < 0 or not 0 <= o.momentum < 1:
            errs.append("optim.lr and optim.weight_decay must be >= 0 and optim.momentum in [0, 1)")
        if p.enabled:
            if p.target_nonzero < 1:
                errs.append("prune.target_nonzero must be set when pruning is enabled")
            if p.ramp_epochs < 1:
                errs.append(f"prune.ramp_epochs must be >= 1, got {p.ramp_epochs}")
            if p.scope not in ("global", "per_layer"):
                errs.append(f"prune.scope must be 'global' or 'per_layer', got {p.scope!r}")
            if not 0 <= p.gamma < 1:
                errs.append(f"prune.gamma must lie in [0, 1), got {p.gamma}")
        return errs

    def check(self) -> "ExperimentConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self


# -- text format ---------------------------------------------------------------

def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    items = []
    for part in (p.strip() for p in s.split(",") if p.strip()):
        if ".." in part:
            a, b = part.split("..", 1)
            items.extend(range(int(a), int(b) + 1))
        else:
            items.append(int(part))
    return tuple(items)


def _parse_stem(s: str) -> tuple[tuple[int, int], ...]:
    stem = []
    for part in (p.strip() for p in s.split(",") if p.strip()):
        k, _, st = part.partition("x")
        stem.append((int(k), int(st) if st else 1))
    return tuple(stem)


def _parse_value(default, s: str, key: str):
    if key == "arch.stem":
        return _parse_stem(s)
    if default is None:
        return float(s) if s else None
    if isinstance(default, bool):
        return _parse_bool(s)
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    if isinstance(default, str):
        return s
    if isinstance(default, tuple):
        if key in ("sweep.rho", "sweep.widths", "sweep.seeds", "arch.stages"):
            return _parse_int_list(s)
        if key == "arch.pool_after":
            return tuple(_parse_bool(p) for p in s.split(",") if p.strip())
        if key == "optim.milestones":
            return tuple(float(p) for p in s.split(",") if p.strip())
        return tuple(p.strip() for p in s.split(",") if p.strip())
    raise ValueError(f"unsupported value for {key}")


# config key -> (section attribute path, field name)
_SECTIONS = {
    "arch": ("arch",),
    "damping": ("arch", "damping"),
    "decomp": ("arch", "decomp"),
    "data": ("data",),
    "features": ("features",),
    "optim": ("optim",),
    "prune": ("prune",),
    "sweep": ("sweep",),
}
_ALIASES = {"damping.lambda": "lam"}
_ARCH_SKIP = {"damping", "decomp"}


def _section_obj(cfg: ExperimentConfig, path):
    obj = cfg
    for p in path:
        obj = getattr(obj, p)
    return obj


def from_dict(flat: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``flat`` keys on ``base`` (defaults if omitted)."""
    cfg = base or ExperimentConfig()
    errs = []
    top: dict = {}
    sections: dict[tuple, dict] = {}
    for key, raw in flat.items():
        head, _, rest = key.partition(".")
        try:
            if not rest:
                if head not in ("name", "seed", "out", "strict"):
                    raise KeyError(key)
                top[head] = _parse_value(getattr(cfg, head), raw, key)
                continue
            if head not in _SECTIONS or "." in rest:
                raise KeyError(key)
            path = _SECTIONS[head]
            fname = _ALIASES.get(key, rest)
            current = _section_obj(cfg, path)
            if current is None:  # decomp section not present yet
                current = DecompSpec(enabled=False)
            fields = {f.name for f in dataclasses.fields(current)}
            if fname not in fields or (head == "arch" and fname in _ARCH_SKIP):
                raise KeyError(key)
            sections.setdefault(path, {})[fname] = _parse_value(getattr(current, fname), raw, key)
        except KeyError:
            errs.append(f"unknown config key {key!r}")
        except ValueError as exc:
            errs.append(f"bad value for {key!r}: {raw!r} ({exc})")
    if errs:
        raise ConfigError(errs)

    arch = cfg.arch
    if ("arch", "damping") in sections:
        arch = replace(arch, damping=replace(arch.damping, **sections[("arch", "damping")]))
    if ("arch", "decomp") in sections:
        arch = replace(arch, decomp=replace(arch.decomp or DecompSpec(enabled=False), **sections[("arch", "decomp")]))
    if ("arch",) in sections:
        arch = replace(arch, **sections[("arch",)])
    updates = {name: replace(getattr(cfg, name), **sections[(name,)])
               for name in ("data", "features", "optim", "prune", "sweep") if (name,) in sections}
    return replace(cfg, arch=arch, **updates, **top)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{k}x{s}" for k, s in v)
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def to_dict(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"name": cfg.name, "seed": str(cfg.seed), "out": cfg.out, "strict": _fmt(cfg.strict)}
    for f in dataclasses.fields(cfg.arch):
        if f.name not in _ARCH_SKIP:
            out[f"arch.{f.name}"] = _fmt(getattr(cfg.arch, f.name))
    d = cfg.arch.damping
    out.update({"damping.enabled": _fmt(d.enabled), "damping.lambda": repr(d.lam), "damping.axis": d.axis})
    if cfg.arch.decomp is not None:
        for f in dataclasses.fields(cfg.arch.decomp):
            out[f"decomp.{f.name}"] = _fmt(getattr(cfg.arch.decomp, f.name))
    for section in ("data", "features", "optim", "prune", "sweep"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out[f"{section}.{f.name}"] = _fmt(getattr(obj, f.name))
    return out


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_dict(cfg).items())


def load_config(path) -> ExperimentConfig:
    return from_dict(parse_text(Path(path).read_text()))
