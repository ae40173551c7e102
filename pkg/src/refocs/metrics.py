"""Evaluation metrics: closed-set accuracy, AUROC, openness, macro-F1 and
95% confidence intervals, plus the report container written to disk."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Equals (correctly ordered positive/negative pairs + 0.5 * ties) / (P * N),
    with label 1 as the positive (out-of-distribution) class. Returns NaN when
    only one label value is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks resolve ties as half-counts
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def openness(n_train: int, n_test: int, n_target: int) -> float:
    if min(n_train, n_test, n_target) < 1:
        raise ValueError("openness counts must be >= 1")
    return 1.0 - math.sqrt(2.0 * n_train / (n_test + n_target))


def macro_f1(y_true, y_pred, labels=None) -> float:
    """Unweighted mean of per-class F1 over ``labels`` (default: every label
    appearing in either array). A class with no true and no predicted members
    is skipped; one with zero precision and recall scores 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if labels is None:
        labels = np.union1d(y_true, y_pred)
    scores = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores)) if scores else float("nan")


def confidence_interval(values) -> tuple[float, float]:
    """Mean and the 1.96 * sample-std / sqrt(n) half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("a confidence interval needs at least 2 values")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EvalReport:
    accuracy_mean: float
    accuracy_ci95: float
    auroc_mean: float
    auroc_ci95: float
    accuracy: list[float] = field(repr=False)
    auroc: list[float] = field(repr=False)
    config_hash: str = ""
    score: str = "detector"
    openness_sweep: dict[str, float] | None = None

    @classmethod
    def from_episodes(cls, accuracies, aurocs, config_hash="", score="detector"):
        acc = [100.0 * a for a in accuracies]
        auc = [100.0 * a for a in aurocs]
        am, ac = confidence_interval(acc)
        um, uc = confidence_interval(auc)
        return cls(am, ac, um, uc, acc, auc, config_hash, score)

    def to_dict(self) -> dict:
        return {
            "accuracy_mean": self.accuracy_mean,
            "accuracy_ci95": self.accuracy_ci95,
            "auroc_mean": self.auroc_mean,
            "auroc_ci95": self.auroc_ci95,
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "config_hash": self.config_hash,
            "score": self.score,
            "openness_sweep": self.openness_sweep,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary(self) -> str:
        return (f"Acc {self.accuracy_mean:.2f} ± {self.accuracy_ci95:.2f}  "
                f"AUROC {self.auroc_mean:.2f} ± {self.auroc_ci95:.2f}")


def write_report_table(path, rows: list[tuple[str, EvalReport]]) -> Path:
    """CSV with one row per named report: Acc ± CI and AUROC ± CI."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "acc_mean", "acc_ci95", "auroc_mean", "auroc_ci95"])
        for name, r in rows:
            w.writerow([name, f"{r.accuracy_mean:.2f}", f"{r.accuracy_ci95:.2f}",
                        f"{r.auroc_mean:.2f}", f"{r.auroc_ci95:.2f}"])
    return path


def f1_openness_sweep(state, manifest, config, n_target_values):
    from .engine import f1_openness_sweep as _sweep

    return _sweep(state, manifest, config, n_target_values)
