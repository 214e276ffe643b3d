"""Binary classification metrics and mean(std) aggregation over seeds.

The positive class is non-healthy (label 1). AUROC uses grouped thresholds
(equal scores form one ROC step, equivalent to half credit for tied pairs)
and is evaluated from integer counts, so it equals the pairwise
Mann-Whitney statistic exactly. AUPRC uses the step-wise rule (precision
held constant between recall levels).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

METRICS = ("accuracy", "f1", "auroc", "auprc")


class MetricError(ValueError):
    pass


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class AggregateResult:
    mean: dict
    std: dict
    seeds: list = field(default_factory=list)

    def formatted(self, metric: str) -> str:
        return format_mean_std(self.mean[metric], self.std[metric])

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "seeds": self.seeds,
                "formatted": {m: self.formatted(m) for m in self.mean}}


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise MetricError("empty input")
    if scores.shape != labels.shape:
        raise MetricError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> tuple:
    """(tp, fp, tn, fn) with prediction = score >= threshold."""
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return tp, fp, tn, fn


def _roc_steps(scores, labels):
    """Cumulative (tp, fp) counts at each distinct score, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return tps.astype(np.int64), fps.astype(np.int64)


def auroc(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUROC undefined for single-class labels (pos={n_pos}, neg={n_neg})")
    tps, fps = _roc_steps(scores, labels)
    tp_prev = np.r_[0, tps[:-1]]
    fp_prev = np.r_[0, fps[:-1]]
    # twice the trapezoid area in count units: sum dFP * (TP_prev + TP)
    twice_area = int(np.sum((fps - fp_prev) * (tp_prev + tps)))
    return twice_area / (2 * n_pos * n_neg)


def auprc(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("AUPRC undefined for single-class labels")
    tps, fps = _roc_steps(scores, labels)
    precision = tps / (tps + fps)
    recall_step = np.diff(np.r_[0, tps]) / n_pos
    return float(np.sum(recall_step * precision))


def binary_metrics(scores, labels, threshold: float = 0.5) -> EvalResult:
    scores, labels = _check(scores, labels)
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    n = labels.size
    acc = (tp + tn) / n
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return EvalResult(accuracy=acc, f1=f1, auroc=auroc(scores, labels), auprc=auprc(scores, labels),
                      n_pos=tp + fn, n_neg=tn + fp, threshold=threshold)


def aggregate(results: list, seeds: list | None = None) -> AggregateResult:
    """Per-metric mean and population standard deviation."""
    if not results:
        raise MetricError("aggregate needs at least one result")
    mean, std = {}, {}
    for m in METRICS:
        vals = np.array([getattr(r, m) if not isinstance(r, dict) else r[m] for r in results], dtype=np.float64)
        mean[m] = float(vals.mean())
        std[m] = float(vals.std(ddof=0))
    return AggregateResult(mean, std, list(seeds or []))


def format_mean_std(mean: float, std: float) -> str:
    """``0.942(.005)``: three decimals, leading zero dropped inside the parentheses."""
    s = f"{std:.3f}"
    if s.startswith("0."):
        s = s[1:]
    return f"{mean:.3f}({s})"


def mann_whitney_auc(scores, labels) -> float:
    """Brute-force pairwise AUROC (ties count half); an independent oracle."""
    scores, labels = _check(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("single-class labels")
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else (1 if p == q else 0)
    return twice / (2 * pos.size * neg.size)


def dumps(obj) -> str:
    """Canonical JSON used for every persisted result (stable key order, no timestamps)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)
