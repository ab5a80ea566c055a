"""Per-image Dice, Mann-Whitney ROC AUC and the paired Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidInputError, UndefinedMetricError

EXACT_MAX_N = 25


def dice(pred_mask, gt, threshold: float = 0.5) -> float:
    pred = np.asarray(pred_mask, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} does not match {gt.shape}")
    p = pred >= threshold
    g = gt >= threshold
    tp = np.count_nonzero(p & g)
    denom = np.count_nonzero(p) + np.count_nonzero(g)
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def average_ranks(values) -> np.ndarray:
    """1-based ranks, ties receive the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie) via the rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels must have equal length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = average_ranks(scores)
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str
    w_plus: float = 0.0
    w_minus: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _exact_lower_tail(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(W+ <= w) under random signs, by dynamic programming over subset sums.

    Ranks are doubled so tied (half-integer) ranks stay integral.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    return float(sum(counts[: w_doubled + 1]) / (2 ** doubled_ranks.size))


def wilcoxon_signed_rank(x, y, two_sided: bool = True, method: str = "auto") -> WilcoxonResult:
    """Paired signed-rank test; zero differences are dropped before ranking.

    ``method`` is ``"auto"`` (exact up to 25 non-zero pairs), ``"exact"`` or ``"normal"``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InvalidInputError("paired samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise InsufficientDataError(f"need at least 5 non-zero differences, got {n}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        tail = _exact_lower_tail(2 * ranks, int(round(2 * w)))
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
        z = min(w - mean + 0.5, 0.0) / math.sqrt(var)
        tail = 0.5 * math.erfc(-z / math.sqrt(2.0))
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    p = min(1.0, 2.0 * tail) if two_sided else min(1.0, tail)
    return WilcoxonResult(statistic=w, p_value=p, n_effective=n, method=method,
                          w_plus=w_plus, w_minus=w_minus)


@dataclass
class EvalReport:
    per_image_dice: list[float]
    mean_dice: float
    auc: float
    n_benign: int
    n_malignant: int

    def to_dict(self, with_per_image: bool = False) -> dict:
        out = asdict(self)
        if not with_per_image:
            out.pop("per_image_dice")
        return out


TABLE_DECIMALS = 2


def summary_table(rows: dict[str, tuple[float, float]], decimals: int = TABLE_DECIMALS) -> str:
    """Plain-text table of ``name -> (DC, AUC)``."""
    width = max([len("model")] + [len(k) for k in rows])
    lines = [f"{'model':<{width}}  {'DC':>6}  {'AUC':>6}"]
    for name, (dc, auc_value) in rows.items():
        lines.append(f"{name:<{width}}  {dc:>6.{decimals}f}  {auc_value:>6.{decimals}f}")
    return "\n".join(lines)


def evaluation_report(soft_masks, gts, scores, labels) -> EvalReport:
    per_image = [dice(p, g) for p, g in zip(soft_masks, gts)]
    labels = [int(v) for v in labels]
    try:
        auc_value = auc(scores, labels)
    except UndefinedMetricError:
        auc_value = float("nan")
    return EvalReport(per_image_dice=per_image, mean_dice=float(np.mean(per_image)),
                      auc=auc_value, n_benign=labels.count(0), n_malignant=labels.count(1))
