"""Desk-scale task-interference experiment: baseline vs. consistency-regularized training under domain shift."""
from __future__ import annotations

import dataclasses
import hashlib
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthetic
from .metrics import WilcoxonResult, wilcoxon_signed_rank
from .trainer import (HISTORY_FIELDS, ArraySet, SweepRecord, TrainConfig, TrainResult,
                      alpha_sweep, evaluate, train, write_csv)

TRAIN_SEED, VAL_SEED, TEST_SEED = 101, 202, 303
ALPHA_GRID = (0.1, 0.2, 0.3)


@dataclass
class ExperimentData:
    train: ArraySet
    val: ArraySet
    test: ArraySet

    @classmethod
    def desk(cls, n_train=200, n_val=40, n_test=100, size=64) -> "ExperimentData":
        return cls(
            ArraySet.from_samples(synthetic.make_dataset(n_train, seed=TRAIN_SEED, size=size)),
            ArraySet.from_samples(synthetic.make_dataset(n_val, seed=VAL_SEED, size=size)),
            ArraySet.from_samples(synthetic.make_dataset(n_test, domain="shifted",
                                                         seed=TEST_SEED, size=size)))


@dataclass
class ArmResult:
    name: str
    alpha: float
    best_epoch: int
    val_auc: float
    val_dice: float
    test_dice: list[float]
    test_auc: float
    history_sha256: str
    seconds: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.test_dice))


@dataclass
class ExperimentResult:
    baseline: ArmResult
    proposed: ArmResult
    sweep: list[SweepRecord]
    wilcoxon: WilcoxonResult | None
    seconds: float
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.proposed.mean_dice >= self.baseline.mean_dice

    def summary(self) -> dict:
        arm = lambda a: {k: v for k, v in dataclasses.asdict(a).items() if k != "test_dice"} | {
            "mean_dice": a.mean_dice}
        return {"baseline": arm(self.baseline), "proposed": arm(self.proposed),
                "sweep": [dataclasses.asdict(r) for r in self.sweep],
                "wilcoxon": None if self.wilcoxon is None else self.wilcoxon.to_dict(),
                "seconds": self.seconds, "passed": self.passed, "notes": self.notes}


def base_config(seed: int = 1, **overrides) -> TrainConfig:
    return TrainConfig(batch_size=16, max_epochs=60, patience=10, seed=seed, **overrides)


def history_digest(result: TrainResult) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "history.csv"
        write_csv(result.history, path, HISTORY_FIELDS)
        return hashlib.sha256(path.read_bytes()).hexdigest()


def _arm(name: str, alpha: float, result: TrainResult, test: ArraySet, seconds: float) -> ArmResult:
    rep = evaluate(result.checkpoint, test)
    return ArmResult(name, alpha, result.best_epoch, result.val_report.auc,
                     result.val_report.mean_dice, list(rep.per_image_dice), rep.auc,
                     history_digest(result), seconds)


def run_baseline(config: TrainConfig, data: ExperimentData, out_dir=None) -> ArmResult:
    t0 = time.perf_counter()
    cfg = dataclasses.replace(config, mode="baseline", alpha=0.0)
    res = train(cfg, data.train, data.val, None if out_dir is None else Path(out_dir) / "baseline")
    return _arm("baseline", 0.0, res, data.test, time.perf_counter() - t0)


def run_proposed(config: TrainConfig, alpha: float, data: ExperimentData, out_dir=None) -> ArmResult:
    t0 = time.perf_counter()
    cfg = dataclasses.replace(config, mode="proposed", alpha=alpha)
    res = train(cfg, data.train, data.val,
                None if out_dir is None else Path(out_dir) / f"alpha_{alpha:g}")
    return _arm("proposed", alpha, res, data.test, time.perf_counter() - t0)


def run_experiment(config: TrainConfig | None = None, data: ExperimentData | None = None,
                   grid=ALPHA_GRID, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Baseline plus an alpha sweep selected by validation AUC, both scored on the shifted test set."""
    t0 = time.perf_counter()
    config = config or base_config()
    data = data or ExperimentData.desk()
    baseline = run_baseline(config, data, out_dir)
    t1 = time.perf_counter()
    sweep = alpha_sweep(grid, config, data.train, data.val, out_dir, jobs=jobs)
    chosen = sweep.best_cls
    run = sweep.results[[r.alpha for r in sweep.records].index(chosen.alpha)]
    proposed = _arm("proposed", chosen.alpha, run, data.test,
                    (time.perf_counter() - t1) / len(sweep.records))
    notes = []
    try:
        stat = wilcoxon_signed_rank(proposed.test_dice, baseline.test_dice)
    except ValueError as exc:
        stat = None
        notes.append(f"wilcoxon undefined: {exc}")
    return ExperimentResult(baseline, proposed, sweep.records, stat,
                            time.perf_counter() - t0, notes)
