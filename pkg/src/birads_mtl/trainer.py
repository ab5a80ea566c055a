"""Training loop (AdamW, cosine annealing, early stopping on validation loss) and the alpha sweep."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, UndefinedMetricError
from .losses import CONSISTENCY_MODES, LossBreakdown, LossHyper
from .metrics import EvalReport, auc, evaluation_report
from .model import Checkpoint, NetConfig, parameter_gradients
from .prior import BIRADS_INIT, WEIGHT_NAMES

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 9.2e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 10
    w_seg: float = 0.9
    w_cls: float = 0.1
    alpha: float = 0.17
    lambda_nt: float = 0.5
    beta: float = 0.001
    seed: int = 0
    mode: str = "proposed"
    consistency_grad: str = "both"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    prior_init: tuple[float, float, float, float] = BIRADS_INIT
    widths: tuple[int, int, int] = (8, 16, 32)
    in_channels: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("adam_betas", "prior_init", "widths"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"config field '{name}': {why}")

        for name in ("learning_rate", "weight_decay", "adam_eps"):
            if not getattr(self, name) > 0:
                bad(name, "must be positive")
        for name in ("w_seg", "w_cls", "alpha", "lambda_nt", "beta"):
            if not getattr(self, name) >= 0:
                bad(name, "must be non-negative")
        for name in ("batch_size", "max_epochs", "patience"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                bad(name, "must be an integer >= 1")
        if self.mode not in ("baseline", "proposed"):
            bad("mode", "must be 'baseline' or 'proposed'")
        if self.consistency_grad not in CONSISTENCY_MODES:
            bad("consistency_grad", f"must be one of {CONSISTENCY_MODES}")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            bad("adam_betas", "must be two values in [0, 1)")
        if len(self.widths) != 3:
            bad("widths", "must have three entries")
        if self.in_channels not in (1, 3):
            bad("in_channels", "must be 1 or 3")
        if self.dtype not in ("float32", "float64"):
            bad("dtype", "must be 'float32' or 'float64'")

    @property
    def hyper(self) -> LossHyper:
        alpha = 0.0 if self.mode == "baseline" else self.alpha
        return LossHyper(self.w_seg, self.w_cls, alpha, self.lambda_nt, self.beta)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"config field '{key}': unknown field")
        kwargs = {}
        for key, value in data.items():
            default = known[key].default
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if isinstance(default, tuple):
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(f"config field '{key}': expected a list")
            elif type(default) is not type(value):
                raise ConfigError(f"config field '{key}': expected {type(default).__name__}, "
                                  f"got {type(value).__name__}")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise OSError(f"{path}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def cosine_lr(base_lr: float, epoch: int, max_epochs: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


class AdamW:
    """Adam with decoupled weight decay; decay never enters the moment estimates."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class ArraySet:
    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.size

    @classmethod
    def from_samples(cls, samples) -> "ArraySet":
        if isinstance(samples, ArraySet):
            return samples
        samples = list(samples)
        if not samples:
            raise InvalidInputError("dataset is empty")
        return cls(np.stack([s.image for s in samples]).astype(np.float64),
                   np.stack([s.mask_gt for s in samples]).astype(np.float64),
                   np.array([s.label for s in samples], dtype=np.float64))


def predict(ckpt: Checkpoint, images, batch_size: int = 32):
    """Eval-mode soft masks and malignancy probabilities."""
    from .grid import stable_sigmoid

    masks, probs = [], []
    for start in range(0, len(images), batch_size):
        seg, cls = ckpt.net.forward(images[start:start + batch_size])
        masks.append(stable_sigmoid(seg.data))
        probs.append(stable_sigmoid(cls.data))
    return np.concatenate(masks), np.concatenate(probs)


def evaluate(ckpt: Checkpoint, data, batch_size: int = 32) -> EvalReport:
    data = ArraySet.from_samples(data)
    masks, probs = predict(ckpt, data.images, batch_size)
    return evaluation_report(masks, data.masks, probs, data.labels)


def validate(ckpt: Checkpoint, data: ArraySet, config: TrainConfig,
             batch_size: int = 32) -> tuple[LossBreakdown, EvalReport]:
    """Eval-mode objective (EMA statistics frozen) and metrics from one forward pass."""
    sums = np.zeros(4)
    masks, probs = [], []
    n = len(data)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        obj = ckpt.objective(data.images[sl], data.masks[sl], data.labels[sl], config.hyper,
                             training=False)
        b = obj.breakdown
        sums += (sl.stop - start) * np.array([b.L_seg, b.L_cls, b.L_cons, b.NTP])
        masks.append(obj.soft_mask)
        probs.append(obj.p_hat)
    l_seg, l_cls, l_cons, ntp = sums / n
    l2 = float((ckpt.prior.u.data ** 2).sum())
    loss = LossBreakdown.compose(l_seg, l_cls, l_cons, ntp, l2, config.hyper)
    report = evaluation_report(np.concatenate(masks), data.masks, np.concatenate(probs),
                               data.labels)
    return loss, report


HISTORY_FIELDS = ("epoch", "step", "lr") + LossBreakdown.FIELDS + WEIGHT_NAMES
EPOCH_FIELDS = ("epoch", "lr", "train_total", "val_total", "val_auc", "val_dice",
                "ema_R_min", "ema_R_max", "ema_T_min", "ema_T_max") + WEIGHT_NAMES


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    val_report: EvalReport | None = None


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Sequence[dict], path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


def train(config: TrainConfig, train_set, val_set, out_dir=None) -> TrainResult:
    """Train one model; returns the checkpoint with the lowest validation loss."""
    train_data = ArraySet.from_samples(train_set)
    val_data = ArraySet.from_samples(val_set)
    hyper = config.hyper
    ckpt = Checkpoint.fresh(NetConfig(config.widths, config.in_channels, dtype=config.dtype),
                            seed=config.seed,
                            prior_init=config.prior_init)
    ckpt.meta = {"alpha": hyper.alpha, "mode": config.mode}
    params = ckpt.trainable()
    opt = AdamW(params, config.adam_betas, config.adam_eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, 7])
    result = TrainResult(checkpoint=ckpt.copy())
    stale = 0
    step = 0
    n = len(train_data)
    for epoch in range(config.max_epochs):
        lr = cosine_lr(config.learning_rate, epoch, config.max_epochs)
        order = rng.permutation(n)
        totals = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            obj, grads = parameter_gradients(
                ckpt, train_data.images[idx], train_data.masks[idx], train_data.labels[idx],
                hyper, training=True, consistency_grad=config.consistency_grad)
            opt.step(list(grads.values()), lr)
            step += 1
            ckpt.step = step
            totals.append(obj.breakdown.total)
            w = ckpt.prior.w
            result.history.append({"epoch": epoch, "step": step, "lr": lr,
                                   **obj.breakdown.row(), **dict(zip(WEIGHT_NAMES, map(float, w)))})

        val, report = validate(ckpt, val_data, config)
        w = ckpt.prior.w
        result.epochs.append({
            "epoch": epoch, "lr": lr, "train_total": float(np.mean(totals)),
            "val_total": val.total, "val_auc": report.auc, "val_dice": report.mean_dice,
            "ema_R_min": ckpt.norm_r.running_min, "ema_R_max": ckpt.norm_r.running_max,
            "ema_T_min": ckpt.norm_t.running_min, "ema_T_max": ckpt.norm_t.running_max,
            **dict(zip(WEIGHT_NAMES, map(float, w)))})
        log.info("epoch %d lr %.3g train %.4f val %.4f auc %.4f dice %.4f", epoch, lr,
                 np.mean(totals), val.total, report.auc, report.mean_dice)
        if val.total < result.best_val_loss:
            result.best_val_loss = val.total
            result.best_epoch = epoch
            result.checkpoint = ckpt.copy()
            result.val_report = report
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if out_dir is not None:
        save_run(result, config, out_dir)
    return result


def save_run(result: TrainResult, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result.history, out / "history.csv", HISTORY_FIELDS)
    write_csv(result.epochs, out / "epochs.csv", EPOCH_FIELDS)
    result.checkpoint.save(out / "checkpoint.bin")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class SweepRecord:
    alpha: float
    val_auc: float
    val_dice: float
    checkpoint_id: str


@dataclass
class SweepResult:
    records: list[SweepRecord]
    best_cls: SweepRecord
    best_seg: SweepRecord
    results: list[TrainResult] = field(default_factory=list, repr=False)

    def rows(self) -> list[dict]:
        return [{"alpha": r.alpha, "val_auc": r.val_auc, "val_dice": r.val_dice,
                 "checkpoint_id": r.checkpoint_id,
                 "best_cls": int(r is self.best_cls), "best_seg": int(r is self.best_seg)}
                for r in self.records]


SWEEP_FIELDS = ("alpha", "val_auc", "val_dice", "checkpoint_id", "best_cls", "best_seg")


def select(records: Sequence[SweepRecord], key: str) -> SweepRecord:
    """Argmax of ``key``; ties go to the smaller alpha, NaN never wins."""
    best = None
    for rec in sorted(records, key=lambda r: r.alpha):
        value = getattr(rec, key)
        if best is None or (not math.isnan(value) and
                            (math.isnan(getattr(best, key)) or value > getattr(best, key))):
            best = rec
    return best


def _sweep_one(args):
    alpha, base, train_set, val_set, out_dir = args
    config = dataclasses.replace(base, alpha=alpha, mode="proposed")
    run_dir = None if out_dir is None else Path(out_dir) / f"alpha_{alpha:g}"
    return train(config, train_set, val_set, run_dir)


def alpha_sweep(grid: Sequence[float], base_config: TrainConfig, train_set, val_set,
                out_dir=None, jobs: int = 1) -> SweepResult:
    grid = [float(a) for a in grid]
    if not grid:
        raise InvalidInputError("alpha grid is empty")
    train_data = ArraySet.from_samples(train_set)
    val_data = ArraySet.from_samples(val_set)
    tasks = [(a, base_config, train_data, val_data, out_dir) for a in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    records = []
    for alpha, res in zip(grid, results):
        rep = res.val_report
        records.append(SweepRecord(alpha, rep.auc, rep.mean_dice, f"alpha_{alpha:g}"))
    result = SweepResult(records, select(records, "val_auc"), select(records, "val_dice"), results)
    if out_dir is not None:
        write_csv(result.rows(), Path(out_dir) / "sweep.csv", SWEEP_FIELDS)
    return result


def val_auc(ckpt: Checkpoint, data) -> float:
    data = ArraySet.from_samples(data)
    _, probs = predict(ckpt, data.images)
    try:
        return auc(probs, data.labels)
    except UndefinedMetricError:
        return float("nan")
