"""Command-line entry point: ``rfdamp <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Data goes to stdout or files under ``--out``; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, from_dict, load_config, parse_text
from .erf import measure_erf, probe_input
from .errors import ValidationError
from .features import manifest_dataset, read_manifest, wav_file_to_logmel
from .model import arch_geometry, build, summarize
from .pruning import init_prune_state, schedule
from .rf import RHO_MAX, RHO_MIN, max_rf
from .train import VARIANTS, apply_variant, determinism, run, sweep, sweep_csv

log = logging.getLogger("rfdamp")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="experiment config file (key = value lines)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d, help="output directory (default: config 'out')")
    p.add_argument("--strict-determinism", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="single-threaded numerics; reruns are bitwise identical")
    p.add_argument("--set", action="append", default=d, metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _int_list(s: str) -> list[int]:
    out = []
    for part in (p.strip() for p in s.split(",") if p.strip()):
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfdamp", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("train", "train one configuration")
    p.add_argument("--variant", choices=VARIANTS, help="apply a named variant to the config first")

    p = add("sweep", "run a rho x variant x width x seed grid; writes sweep.csv")
    p.add_argument("--rho", type=_int_list, help="e.g. 3..12 or 3,5,7")
    p.add_argument("--variants", type=lambda s: [v.strip() for v in s.split(",") if v.strip()])
    p.add_argument("--widths", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--jobs", type=int)

    p = add("summarize", "per-tensor parameter counts of the configured model")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--checkpoint", help="count non-zeros of a trained checkpoint")
    p.add_argument("--format", choices=("csv", "table"), default="csv")

    add("rf-table", "theoretical RF for every rho of the configured geometry")

    p = add("erf", "measure the effective receptive field of a (trained) model")
    p.add_argument("--checkpoint", help="checkpoint written by 'train'")
    p.add_argument("--shape", type=_int_list, help="input frames,bins (default: data.frames,data.bins)")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--fraction", type=float, default=0.95)

    p = add("features", "extract normalized-ready log-mel features from WAV files")
    p.add_argument("inputs", nargs="*", help="WAV files")
    p.add_argument("--manifest", help="CSV with path,label,split columns")

    p = add("prune-plan", "per-epoch pruned-count schedule")
    p.add_argument("--target", type=int, help="non-zero parameter target (default: prune.target_nonzero)")
    p.add_argument("--ramp", type=int, help="ramp epochs (default: prune.ramp_epochs)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.update(parse_text(item))
        cfg = from_dict(overrides, cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.strict_determinism:
        cfg = replace(cfg, strict=True)
    return cfg.check()


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def cmd_train(cfg: ExperimentConfig, args) -> None:
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    out_dir = Path(cfg.out) / cfg.name
    record = run(cfg, out_dir)
    s = record.final_summary
    _emit(f"name={cfg.name} final_accuracy={record.final_accuracy:.6f} total_params={s.total_params} "
          f"nonzero_params={s.nonzero_params} rf={s.rf.rf_t}x{s.rf.rf_f} out={out_dir}\n")


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    out_dir = Path(cfg.out) / cfg.name
    cells = sweep(cfg, out_dir, args.rho, args.variants, args.widths, args.seeds, args.jobs)
    _emit(sweep_csv(cells))
    failed = [c for c in cells if c.status != "ok"]
    for c in failed:
        log.error("cell rho=%d variant=%s width=%d seed=%d %s", c.rho, c.variant, c.width, c.seed, c.status)
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(cells)} sweep cells failed; see sweep.csv")


def _load_into(net, path, cfg):
    tensors, _ = checkpoint.load(path)
    prune_state = None
    if any(k.startswith("mask/") for k in tensors):
        prune_state = init_prune_state(net, max(cfg.prune.target_nonzero, 1), cfg.prune.ramp_epochs)
    checkpoint.load_network_state(net, tensors, prune_state)


def cmd_summarize(cfg: ExperimentConfig, args) -> None:
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    cfg.arch.check()
    net = build(cfg.arch, seed=cfg.seed)
    if args.checkpoint:
        _load_into(net, args.checkpoint, cfg)
    s = summarize(net)
    _emit(s.format_table() + "\n" if args.format == "table" else s.to_csv())


def rf_rows(cfg: ExperimentConfig) -> list[list]:
    rows = []
    for rho in range(RHO_MIN, RHO_MAX + 1):
        r = max_rf(arch_geometry(replace(cfg.arch, rho=rho)))
        rows.append([rho, r.rf_t, r.rf_f, r.jump_t, r.jump_f])
    return rows


def cmd_rf_table(cfg: ExperimentConfig, args) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rho", "rf_t", "rf_f", "jump_t", "jump_f"])
    w.writerows(rf_rows(cfg))
    _emit(buf.getvalue())


def cmd_erf(cfg: ExperimentConfig, args) -> None:
    cfg.arch.check()
    net = build(cfg.arch, seed=cfg.seed)
    if args.checkpoint:
        _load_into(net, args.checkpoint, cfg)
    shape = args.shape or [cfg.data.frames, cfg.data.bins]
    if len(shape) != 2:
        raise UsageError(f"--shape expects frames,bins, got {shape}")
    x = probe_input((cfg.arch.in_channels, *shape), cfg.seed, args.batch)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = measure_erf(net, x, args.fraction)
    for w in caught:
        log.warning("%s", w.message)
    out_dir = Path(cfg.out) / cfg.name
    checkpoint.atomic_write(out_dir / "erf.csv", report.to_csv())
    _emit(report.summary_line() + f" map={out_dir / 'erf.csv'}\n")


def cmd_features(cfg: ExperimentConfig, args) -> None:
    if not args.inputs and not args.manifest:
        raise UsageError("features: give WAV files or --manifest")
    out_dir = Path(cfg.out)
    if args.manifest:
        read_manifest(args.manifest)  # fail fast on a malformed manifest
        ds = manifest_dataset(args.manifest, cfg.features)
        tensors = {"x_train": ds.x_train, "y_train": ds.y_train.astype(np.float32),
                   "x_test": ds.x_test, "y_test": ds.y_test.astype(np.float32)}
        path = out_dir / "features.bin"
        checkpoint.save(path, tensors, {"num_classes": ds.num_classes})
        _emit(f"{path} train={ds.x_train.shape} test={ds.x_test.shape}\n")
    for wav in args.inputs:
        feats = wav_file_to_logmel(wav, cfg.features)
        path = out_dir / (Path(wav).stem + ".bin")
        checkpoint.save(path, {"logmel": feats}, {"source": str(wav)})
        _emit(f"{path} shape={'x'.join(map(str, feats.shape))}\n")


def cmd_prune_plan(cfg: ExperimentConfig, args) -> None:
    target = args.target if args.target is not None else cfg.prune.target_nonzero
    ramp = args.ramp if args.ramp is not None else cfg.prune.ramp_epochs
    cfg.arch.check()
    net = build(cfg.arch, seed=None)
    state = init_prune_state(net, target, ramp, cfg.prune.gamma or None, cfg.prune.scope)
    total = summarize(net).total_params
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "pruned", "nonzero_params"])
    for epoch, pruned in enumerate(schedule(state.total_prunable, state.prunable_target, ramp, state.gamma)):
        w.writerow([epoch, pruned, total - pruned])
    _emit(buf.getvalue())


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "summarize": cmd_summarize,
    "rf-table": cmd_rf_table,
    "erf": cmd_erf,
    "features": cmd_features,
    "prune-plan": cmd_prune_plan,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        cfg = resolve_config(args)
        with determinism(cfg.strict):
            COMMANDS[args.command](cfg, args)
    except ValueError as exc:  # ValidationError and subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, FileNotFoundError) else 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
