"""Training runs and sweeps over rho x variant x width.

Final accuracy is the mean test accuracy of the last 10 epochs. Pruning is
applied at epoch boundaries: after epoch ``e`` completes the model holds
exactly ``schedule_pruned_count(e)`` pruned weights.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .config import ExperimentConfig, to_text
from .decomposition import DecompSpec
from .errors import ConfigError, NonFiniteError
from .features import Dataset, manifest_dataset, normalize_splits, synth_dataset
from .model import ModelSummary, build, summarize
from .ops import softmax_cross_entropy
from .optim import SGD, lr_at
from .pruning import apply_magnitude_pruning, enforce_masks, init_prune_state

log = logging.getLogger(__name__)

FINAL_WINDOW = 10
VARIANTS = ("undamped", "damped", "decomp", "decomp_nd", "pruned", "pruned_nd")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    nonzero_params: int
    pruned: int


@dataclass
class RunRecord:
    config: ExperimentConfig
    initial_summary: ModelSummary
    final_summary: ModelSummary
    initial_test_acc: float
    initial_test_loss: float
    epochs: list[EpochStats] = field(default_factory=list)
    network: object = field(default=None, repr=False, compare=False)
    prune_state: object = field(default=None, repr=False, compare=False)

    @property
    def final_accuracy(self) -> float:
        if not self.epochs:
            return self.initial_test_acc
        tail = self.epochs[-FINAL_WINDOW:]
        return float(np.mean([e.test_acc for e in tail]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "nonzero_params", "pruned"])
        w.writerow([0, "", "", "", repr(self.initial_test_loss), repr(self.initial_test_acc),
                    self.initial_summary.nonzero_params, 0])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.test_loss),
                        repr(e.test_acc), e.nonzero_params, e.pruned])
        return buf.getvalue()


@contextlib.contextmanager
def determinism(strict: bool):
    """Single-threaded BLAS while ``strict`` is set."""
    if strict:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def load_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "manifest":
        ds = manifest_dataset(d.manifest, cfg.features)
    else:
        ds = synth_dataset(cfg.arch.num_classes, d.n_per_class, cfg.data_seed(), d.difficulty, d.frames, d.bins,
                           d.test_per_class, d.cue_extent, d.position_jitter)
    _, ds.x_train, ds.x_test = normalize_splits(ds.x_train, ds.x_test)
    return ds


def evaluate(network, x, y, batch_size: int = 64) -> tuple[float, float]:
    network.eval()
    loss_sum, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = network.forward(x[i:i + batch_size])
        loss, _ = softmax_cross_entropy(logits, y[i:i + batch_size])
        loss_sum += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    network.train()
    return loss_sum / len(x), correct / len(x)


def _snapshot(network, prune_state):
    return {k: v.copy() for k, v in checkpoint.network_state(network, prune_state).items()}


def run(cfg: ExperimentConfig, out_dir=None, data: Dataset | None = None) -> RunRecord:
    """Train and evaluate one configuration.

    Writes ``record.csv``, ``summary.csv``, ``config.cfg`` and ``checkpoint.bin``
    into ``out_dir`` when given. ``data`` overrides the configured data source.
    """
    cfg.check()
    with determinism(cfg.strict):
        return _run(cfg, Path(out_dir) if out_dir is not None else None, data)


def _run(cfg: ExperimentConfig, out_dir: Path | None, data: Dataset | None) -> RunRecord:
    net = build(cfg.arch, seed=cfg.seed)
    prune_state = None
    if cfg.prune.enabled:
        prune_state = init_prune_state(net, cfg.prune.target_nonzero, cfg.prune.ramp_epochs,
                                       cfg.prune.gamma or None, cfg.prune.scope)
    ds = data if data is not None else load_data(cfg)
    if ds.num_classes != cfg.arch.num_classes:
        raise ConfigError(f"data has {ds.num_classes} classes but arch.num_classes = {cfg.arch.num_classes}")
    initial = summarize(net)
    test_loss0, test_acc0 = evaluate(net, ds.x_test, ds.y_test)
    record = RunRecord(cfg, initial, initial, test_acc0, test_loss0)

    o = cfg.optim
    opt = SGD(list(net.named_parameters()), o.lr, o.momentum, o.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(ds.x_train)
    steps = max(1, -(-n // o.batch_size))
    last_good = _snapshot(net, prune_state)
    net.train()
    for epoch in range(o.epochs):
        perm = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(steps):
            idx = perm[s * o.batch_size:(s + 1) * o.batch_size]
            if idx.size == 0:
                continue
            opt.lr = lr_at(epoch, o.lr, o.epochs, o.warmup_epochs, o.milestones, o.decay, s / steps)
            opt.zero_grad()
            logits = net.forward(ds.x_train[idx])
            loss, grad = softmax_cross_entropy(logits, ds.y_train[idx])
            if not np.isfinite(loss):
                if out_dir is not None:
                    checkpoint.save(out_dir / "checkpoint.bin", last_good,
                                    {"name": cfg.name, "epoch": epoch, "status": "diverged"})
                raise NonFiniteError(f"loss became non-finite at epoch {epoch + 1}, step {s}; "
                                     "last good checkpoint kept")
            net.backward(grad)
            opt.step()
            if prune_state is not None:
                enforce_masks(net, prune_state)
            loss_sum += loss * idx.size
            correct += int((logits.argmax(axis=1) == ds.y_train[idx]).sum())
        if prune_state is not None:
            apply_magnitude_pruning(net, prune_state, prune_state.scheduled(epoch + 1))
            prune_state.history.append(prune_state.pruned)
        test_loss, test_acc = evaluate(net, ds.x_test, ds.y_test)
        summary = summarize(net)
        record.epochs.append(EpochStats(epoch + 1, opt.lr, loss_sum / n, correct / n, test_loss, test_acc,
                                        summary.nonzero_params,
                                        prune_state.pruned if prune_state is not None else 0))
        last_good = _snapshot(net, prune_state)
        log.info("%s epoch %d loss %.4f acc %.3f test %.3f nonzero %d", cfg.name, epoch + 1,
                 loss_sum / n, correct / n, test_acc, summary.nonzero_params)
    record.final_summary = summarize(net)
    record.network = net
    record.prune_state = prune_state
    if out_dir is not None:
        write_run(out_dir, record, net, prune_state)
    return record


def write_run(out_dir: Path, record: RunRecord, net, prune_state=None) -> None:
    checkpoint.atomic_write(out_dir / "record.csv", record.to_csv())
    checkpoint.atomic_write(out_dir / "summary.csv", record.final_summary.to_csv())
    checkpoint.atomic_write(out_dir / "config.cfg", to_text(record.config))
    meta = {"name": record.config.name, "epochs": len(record.epochs), "final_accuracy": record.final_accuracy,
            "nonzero_params": record.final_summary.nonzero_params}
    checkpoint.save(out_dir / "checkpoint.bin", checkpoint.network_state(net, prune_state), meta)


# -- sweeps ----------------------------------------------------------------------

def apply_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Configure damping / decomposition / pruning for a named variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    damped = variant in ("damped", "decomp", "pruned")
    decomp = cfg.arch.decomp or DecompSpec()
    arch = replace(cfg.arch, damping=replace(cfg.arch.damping, enabled=damped),
                   decomp=replace(decomp, enabled=variant.startswith("decomp")))
    prune = replace(cfg.prune, enabled=variant.startswith("pruned"))
    return replace(cfg, arch=arch, prune=prune)


@dataclass
class SweepCell:
    rho: int
    variant: str
    width: int
    seed: int
    status: str = "ok"
    record: RunRecord | None = None

    def row(self) -> list:
        r = self.record
        if r is None:
            return [self.rho, self.variant, self.width, self.seed, "", "", "", "", "", self.status]
        s = r.final_summary
        return [self.rho, self.variant, self.width, self.seed, s.rf.rf_t, s.rf.rf_f, s.total_params,
                s.nonzero_params, repr(r.final_accuracy), self.status]


SWEEP_HEADER = ["rho", "variant", "width", "seed", "rf_t", "rf_f", "total_params", "nonzero_params",
                "final_accuracy", "status"]


def sweep_cells(base: ExperimentConfig, rhos=None, variants=None, widths=None, seeds=None):
    rhos = tuple(rhos if rhos is not None else base.sweep.rho)
    variants = tuple(variants if variants is not None else base.sweep.variants)
    widths = tuple(widths if widths is not None else (base.sweep.widths or (base.arch.base_channels,)))
    seeds = tuple(seeds if seeds is not None else (base.sweep.seeds or (base.seed,)))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    cells = []
    for rho in rhos:
        for variant in variants:
            for width in widths:
                for seed in seeds:
                    cfg = apply_variant(base, variant)
                    cfg = replace(cfg, seed=seed, name=f"{base.name}_r{rho}_{variant}_w{width}_s{seed}",
                                  arch=replace(cfg.arch, rho=rho, base_channels=width))
                    cells.append((SweepCell(rho, variant, width, seed), cfg))
    return cells


def _run_cell(args):
    cell, cfg, out_dir, data = args
    try:
        cell.record = run(cfg, out_dir / cfg.name if out_dir is not None else None, data)
        if cell.record is not None:
            # networks are not shipped back across processes
            cell.record.network = None
    except Exception as exc:  # a failing cell is recorded, the sweep goes on
        cell.status = f"failed: {type(exc).__name__}: {exc}"
        log.warning("sweep cell %s failed\n%s", cfg.name, traceback.format_exc())
    return cell


def sweep(base: ExperimentConfig, out_dir=None, rhos=None, variants=None, widths=None, seeds=None,
          jobs: int | None = None, data: Dataset | None = None) -> list[SweepCell]:
    """Run every grid cell; writes ``<out_dir>/sweep.csv`` with one row per cell."""
    out_dir = Path(out_dir) if out_dir is not None else None
    pairs = sweep_cells(base, rhos, variants, widths, seeds)
    jobs = base.sweep.jobs if jobs is None else jobs
    args = [(cell, cfg, out_dir, data) for cell, cfg in pairs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, args))
    else:
        cells = [_run_cell(a) for a in args]
    if out_dir is not None:
        checkpoint.atomic_write(out_dir / "sweep.csv", sweep_csv(cells))
    return cells


def sweep_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for c in cells:
        w.writerow(c.row())
    return buf.getvalue()
