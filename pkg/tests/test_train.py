import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from rfdamp import checkpoint
from rfdamp.config import from_dict
from rfdamp.errors import ConfigError, NonFiniteError
from rfdamp.model import count_params
from rfdamp.pruning import schedule
from rfdamp.train import (FINAL_WINDOW, EpochStats, RunRecord, apply_variant, load_data, run, sweep, sweep_cells,
                          sweep_csv)

EASY = {"arch.base_channels": "8", "arch.rho": "3", "arch.num_classes": "4", "data.n_per_class": "32",
        "data.test_per_class": "8", "data.frames": "24", "data.bins": "24", "data.difficulty": "0",
        "data.position_jitter": "0", "optim.epochs": "30", "optim.batch_size": "16",
        "prune.target_nonzero": "5000", "prune.ramp_epochs": "15"}


def _cfg(**over):
    flat = dict(EASY)
    flat.update({k.replace("__", "."): str(v) for k, v in over.items()})
    return from_dict(flat)


def test_zero_epochs_gives_summary_and_initial_accuracy():
    rec = run(_cfg(optim__epochs=0, arch__num_classes=10, data__test_per_class=20))
    assert rec.epochs == []
    assert rec.final_accuracy == rec.initial_test_acc
    assert rec.final_summary.total_params == count_params(rec.config.arch)
    # untrained: near the 1-in-10 rate
    assert rec.initial_test_acc <= 0.3


@pytest.mark.parametrize("variant", ["damped", "decomp", "pruned"])
def test_easy_task_is_learned(variant):
    rec = run(apply_variant(_cfg(), variant))
    assert rec.final_accuracy >= 0.95
    assert all(0 <= e.test_acc <= 1 and 0 <= e.train_acc <= 1 for e in rec.epochs)


def test_shuffled_labels_stay_near_chance():
    cfg = _cfg(optim__epochs=12)
    ds = load_data(cfg)
    ds.y_train = np.random.default_rng(0).permutation(ds.y_train)
    assert run(cfg, data=ds).final_accuracy <= 0.5


def test_pruned_nonzero_counts_follow_schedule():
    cfg = apply_variant(_cfg(optim__epochs=18), "pruned")
    rec = run(cfg)
    total = rec.initial_summary.total_params
    plan = schedule(total, 5000, 15, epochs=18)
    assert [e.nonzero_params for e in rec.epochs] == [total - int(plan[e]) for e in range(1, 19)]
    assert [e.pruned for e in rec.epochs] == [int(plan[e]) for e in range(1, 19)]
    assert rec.final_summary.nonzero_params == 5000


def test_prune_target_above_model_size_fails_before_training():
    cfg = apply_variant(_cfg(prune__target_nonzero=10 ** 7), "pruned")
    with pytest.raises(ConfigError):
        run(cfg)


def test_class_count_mismatch():
    cfg = _cfg(optim__epochs=1)
    ds = load_data(replace(cfg, arch=replace(cfg.arch, num_classes=3)))
    with pytest.raises(ConfigError, match="classes"):
        run(cfg, data=ds)


def test_final_accuracy_is_mean_of_last_ten():
    rec = run(_cfg(optim__epochs=0))
    accs = np.linspace(0.1, 0.9, 14)
    rec.epochs = [EpochStats(i + 1, 0.1, 0, 0, 0, float(a), 0, 0) for i, a in enumerate(accs)]
    assert FINAL_WINDOW == 10
    assert rec.final_accuracy == pytest.approx(np.mean(accs[-10:]), abs=0)
    rec.epochs = rec.epochs[:4]
    assert rec.final_accuracy == pytest.approx(np.mean(accs[:4]))


def test_non_finite_loss_aborts_and_keeps_checkpoint(tmp_path):
    cfg = _cfg(optim__epochs=2)
    ds = load_data(cfg)
    ds.x_train[5] = np.nan
    with pytest.raises(NonFiniteError):
        run(cfg, out_dir=tmp_path, data=ds)
    tensors, meta = checkpoint.load(tmp_path / "checkpoint.bin")
    assert meta["status"] == "diverged"
    assert all(np.isfinite(t).all() for t in tensors.values())


def test_run_writes_outputs(tmp_path):
    rec = run(_cfg(optim__epochs=2), out_dir=tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"record.csv", "summary.csv", "config.cfg", "checkpoint.bin"}
    lines = (tmp_path / "record.csv").read_text().splitlines()
    assert len(lines) == 2 + len(rec.epochs)
    assert lines[0].startswith("epoch,lr,train_loss")


def test_strict_runs_are_bitwise_identical(tmp_path):
    cfg = replace(apply_variant(_cfg(optim__epochs=3, prune__ramp_epochs=2), "pruned"), strict=True)
    a = run(cfg, out_dir=tmp_path / "a")
    b = run(cfg, out_dir=tmp_path / "b")
    assert a.to_csv() == b.to_csv()
    for name in ("checkpoint.bin", "record.csv", "summary.csv", "config.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_sweep_grid_rows_and_rf_per_rho(tmp_path):
    base = _cfg(optim__epochs=1)
    cells = sweep(base, out_dir=tmp_path, rhos=(2, 4), variants=("damped", "undamped", "decomp"), seeds=(0, 1))
    assert len(cells) == 12 and all(c.status == "ok" for c in cells)
    rows = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 12
    for rho in (2, 4):
        rfs = {(c.record.final_summary.rf.rf_t, c.record.final_summary.rf.rf_f) for c in cells if c.rho == rho}
        assert len(rfs) == 1


def test_singleton_sweep_equals_run():
    base = replace(_cfg(optim__epochs=2), strict=True)
    (cell,) = sweep(base, rhos=(3,), variants=("damped",), seeds=(0,))
    (_, cfg), = sweep_cells(base, rhos=(3,), variants=("damped",), seeds=(0,))
    direct = run(cfg)
    assert cell.record.to_csv() == direct.to_csv()


def test_failing_cell_is_recorded_and_sweep_continues():
    base = _cfg(optim__epochs=1)
    cells = sweep(base, rhos=(3,), variants=("decomp", "damped"), widths=(6,), seeds=(0,))
    status = {c.variant: c.status for c in cells}
    assert status["damped"] == "ok"
    assert status["decomp"].startswith("failed: ConfigError")
    rows = list(csv.DictReader(io.StringIO(sweep_csv(cells))))
    assert [r["status"] for r in rows] == [c.status for c in cells]
    assert rows[0]["final_accuracy"] == ""


def test_parallel_sweep_matches_serial():
    base = replace(_cfg(optim__epochs=1), strict=True)
    serial = sweep(base, rhos=(3, 4), variants=("damped",), seeds=(0,), jobs=1)
    parallel = sweep(base, rhos=(3, 4), variants=("damped",), seeds=(0,), jobs=2)
    assert [c.record.to_csv() for c in serial] == [c.record.to_csv() for c in parallel]


def test_unknown_variant():
    with pytest.raises(ConfigError):
        apply_variant(_cfg(), "tiny")


def test_record_type():
    assert isinstance(run(_cfg(optim__epochs=1)), RunRecord)
