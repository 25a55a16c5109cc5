"""Confusion-count metrics and threshold-sweep ROC / AUC."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    roc_points: list = field(default_factory=list)  # (fpr, tpr, threshold)
    auc: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["roc_points"] = [[float(a), float(b), float(t)] for a, b, t in self.roc_points]
        return json.dumps(d, indent=2)


def _binary(name, v):
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    if not np.all((v == 0) | (v == 1)):
        raise ValueError(f"{name} must contain only 0/1")
    return v.astype(np.int64)


def confusion(labels, predictions) -> tuple[int, int, int, int]:
    y, p = _binary("labels", labels), _binary("predictions", predictions)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} and predictions {p.shape} differ in length")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, tn, fn


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with 0 wherever a denominator vanishes."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_score(labels, predictions) -> float:
    tp, fp, _, fn = confusion(labels, predictions)
    return prf(tp, fp, fn)[2]


def roc_auc(probabilities, labels):
    """Stepwise ROC from a descending sweep over unique scores, and its trapezoid area.

    Returns ``(points, auc)`` with points ``(fpr, tpr, threshold)`` starting at
    ``(0, 0, inf)``. Tied scores move both rates in one step, which makes the
    area equal the Mann-Whitney statistic with ties counted 1/2.
    """
    s = np.asarray(probabilities, dtype=np.float64)
    y = _binary("labels", labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("roc_auc: non-finite score")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # final index of each tie group
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    points = list(zip(fpr.tolist(), tpr.tolist(), thresholds.tolist()))
    return points, auc


def metrics_report(probabilities, labels, threshold: float = 0.5, with_roc: bool = True) -> MetricsReport:
    p = np.asarray(probabilities, dtype=np.float64)
    y = _binary("labels", labels)
    if p.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    tp, fp, tn, fn = confusion(y, (p >= threshold).astype(np.int64))
    precision, recall, f1 = prf(tp, fp, fn)
    points, auc = ([], None)
    if with_roc and 0 < y.sum() < y.size:
        points, auc = roc_auc(p, y)
    return MetricsReport(tp, fp, tn, fn, precision, recall, f1, points, auc)


def write_roc_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for fpr, tpr, thr in points:
            w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])


def write_metrics(path, report: MetricsReport) -> None:
    Path(path).write_text(report.to_json())
