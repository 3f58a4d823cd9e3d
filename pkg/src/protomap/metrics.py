"""Evaluation metrics and per-fold report aggregation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # Mann-Whitney U from average ranks; tied pairs count one half
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels, mode: str = "binary") -> float:
    """Binary AUC on a score vector, or unweighted one-vs-rest mean on a score matrix."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    if mode == "binary":
        if scores.ndim == 2:
            scores = scores[:, 1]
        return _binary_auc(scores, labels.astype(int) == 1)
    if mode == "ovr":
        n_classes = scores.shape[1]
        return float(np.mean([_binary_auc(scores[:, c], labels == c) for c in range(n_classes)]))
    raise ValueError(f"unknown AUC mode {mode!r}")


def balanced_accuracy(pred, labels, classes: Sequence[int] | None = None) -> float:
    """Mean per-class recall over the classes present in ``labels``.

    If ``classes`` is given, every one of them must occur in ``labels``.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("empty input")
    present = np.unique(labels)
    if classes is not None:
        missing = sorted(set(classes) - set(present.tolist()))
        if missing:
            raise UndefinedMetricError(f"class(es) {missing} have no true samples")
    recalls = [np.mean(pred[labels == c] == c) for c in present]
    return float(np.mean(recalls))


def f1_weighted(pred, labels) -> float:
    """Support-weighted F1; classes with no true and no predicted positives score 0."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("empty input")
    total = 0.0
    for c in np.unique(labels):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        total += f1 * np.sum(labels == c)
    return float(total / len(labels))


def rmse_r2(pred, targets) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if pred.shape != targets.shape or pred.size == 0:
        raise UndefinedMetricError("predictions and targets need equal, non-zero length")
    ss_res = float(np.sum((targets - pred) ** 2))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return math.sqrt(ss_res / len(targets)), 1.0 - ss_res / ss_tot


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    probs = np.asarray(probs, dtype=float)
    pred = np.argmax(probs, axis=1)
    mode = "binary" if probs.shape[1] == 2 else "ovr"
    return {"auc": roc_auc(probs, labels, mode), "balanced_accuracy": balanced_accuracy(pred, labels),
            "f1_weighted": f1_weighted(pred, labels)}


def regression_metrics(pred: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    rmse, r2 = rmse_r2(pred, targets)
    return {"rmse": rmse, "r2": r2}


@dataclass
class MetricsReport:
    """Per-fold metric values with mean and population std across folds."""

    task: str
    per_fold: list[dict[str, float]] = field(default_factory=list)
    folds: list[int] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    @property
    def metric_names(self) -> list[str]:
        return list(self.per_fold[0].keys()) if self.per_fold else []

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([f[m] for f in self.per_fold])) for m in self.metric_names}

    @property
    def std(self) -> dict[str, float]:
        return {m: float(np.std([f[m] for f in self.per_fold])) for m in self.metric_names}

    def to_dict(self) -> dict:
        return {"task": self.task, "folds": self.folds, "per_fold": self.per_fold,
                "mean": self.mean, "std": self.std, "errors": self.errors}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["task"], [dict(f) for f in d["per_fold"]], list(d["folds"]),
                   list(d.get("errors", [])))

    def csv_rows(self) -> list[dict]:
        rows = []
        for fold, vals in zip(self.folds, self.per_fold):
            rows.append({"task": self.task, "fold": fold, **vals})
        mean, std = self.mean, self.std
        rows.append({"task": self.task, "fold": "mean", **mean})
        rows.append({"task": self.task, "fold": "std", **std})
        return rows


def write_reports(reports: Sequence[MetricsReport], json_path: str | Path,
                  csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps({r.task: r.to_dict() for r in reports}, indent=2))
    rows = [row for r in reports for row in r.csv_rows()]
    fields = ["task", "fold"] + sorted({k for row in rows for k in row} - {"task", "fold"})
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
