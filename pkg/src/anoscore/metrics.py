"""Detection metrics over anomaly scores.

Abnormal is the positive class everywhere, oriented so that higher scores
mean more anomalous.  AUROC is the Mann-Whitney statistic
``P(score_abnormal > score_normal) + P(equal) / 2`` computed via average
ranks, which is exactly the trapezoidal area under the tie-aware ROC
curve.  The best-F1 threshold search sweeps midpoints between consecutive
distinct scores plus sentinels at both infinities, predicting abnormal at
``score >= threshold``; ties on F1 resolve to the smallest threshold so
results are reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError

__all__ = [
    "LabeledScores",
    "auroc",
    "best_f1",
    "accuracy_at",
    "roc_points",
    "score_histograms",
    "export_roc_hist",
]


@dataclass
class LabeledScores:
    """Parallel score/label arrays; label 1 marks abnormal."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.scores.size != self.labels.size:
            raise DataError(
                f"{self.scores.size} scores vs {self.labels.size} labels"
            )
        if self.scores.size == 0:
            raise DataError("need at least one scored sample")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DataError("labels must be 0 (normal) or 1 (abnormal)")

    def require_both_classes(self) -> None:
        if self.labels.min() == self.labels.max():
            raise DomainError("need at least one sample of each class")


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def auroc(data: LabeledScores) -> float:
    """Tie-aware area under the ROC curve."""
    data.require_both_classes()
    ranks = _average_ranks(data.scores)
    pos = data.labels == 1
    n1 = int(pos.sum())
    n0 = data.labels.size - n1
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def best_f1(data: LabeledScores):
    """Maximum F1 over all thresholds and the smallest threshold achieving it."""
    data.require_both_classes()
    distinct = np.unique(data.scores)
    candidates = np.concatenate(
        [[-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]]
    )
    best = (-1.0, np.inf)
    for thr in candidates:
        pred = data.scores >= thr
        tp = int(np.sum(pred & (data.labels == 1)))
        fp = int(np.sum(pred & (data.labels == 0)))
        fn = int(np.sum(~pred & (data.labels == 1)))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom > 0 else 0.0
        if f1 > best[0]:
            best = (f1, thr)
    return best


def accuracy_at(data: LabeledScores, threshold: float) -> float:
    """Fraction of samples where ``score >= threshold`` matches the label."""
    pred = data.scores >= threshold
    return float(np.mean(pred == (data.labels == 1)))


def roc_points(data: LabeledScores):
    """(fpr, tpr, threshold) triples from (0, 0) at +inf down to (1, 1)."""
    data.require_both_classes()
    n1 = int(np.sum(data.labels == 1))
    n0 = data.labels.size - n1
    rows = [(0.0, 0.0, np.inf)]
    for thr in np.unique(data.scores)[::-1]:
        pred = data.scores >= thr
        tp = int(np.sum(pred & (data.labels == 1)))
        fp = int(np.sum(pred & (data.labels == 0)))
        rows.append((fp / n0, tp / n1, float(thr)))
    return rows


def score_histograms(data: LabeledScores, n_bins: int = 50):
    """Per-class histograms over ``n_bins`` shared bins spanning all scores."""
    lo, hi = float(data.scores.min()), float(data.scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    normal, _ = np.histogram(data.scores[data.labels == 0], bins=edges)
    abnormal, _ = np.histogram(data.scores[data.labels == 1], bins=edges)
    return edges, normal, abnormal


def export_roc_hist(data: LabeledScores, out_dir) -> dict:
    """Write roc.csv and score_hist.csv for external plotting; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    roc_path = out_dir / "roc.csv"
    with open(roc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        writer.writerows(roc_points(data))

    hist_path = out_dir / "score_hist.csv"
    edges, normal, abnormal = score_histograms(data)
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count_normal", "count_abnormal"])
        for i in range(len(normal)):
            writer.writerow([edges[i], edges[i + 1], int(normal[i]), int(abnormal[i])])

    return {"roc": roc_path, "hist": hist_path}
