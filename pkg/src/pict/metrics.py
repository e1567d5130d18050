"""Detection metrics (ROC-AUC, precision at recall) and recognition metrics (Top-1, macro-F1)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredPredictions:
    scores: np.ndarray
    labels: np.ndarray
    predicted_class: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.predicted_class is not None:
            self.predicted_class = np.asarray(self.predicted_class).reshape(-1)
            if len(self.predicted_class) != len(self.labels):
                raise ValueError("predicted_class and labels differ in length")
        if len(self.scores) != len(self.labels):
            raise ValueError(f"{len(self.scores)} scores for {len(self.labels)} labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def roc_auc(scored: ScoredPredictions) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = scored.labels != 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scored.scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_at_recall(scored: ScoredPredictions, target_recall: float = 0.9) -> float:
    """Best precision over thresholds ``score >= t`` whose recall reaches the target."""
    if not 0.0 < target_recall <= 1.0:
        raise ValueError(f"target recall must lie in (0, 1], got {target_recall}")
    pos = scored.labels != 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision at recall needs positive samples")
    order = np.argsort(-scored.scores, kind="stable")
    s, p = scored.scores[order], pos[order].astype(np.int64)
    tp, fp = np.cumsum(p), np.cumsum(1 - p)
    # only cut after the last sample of a run of equal scores
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[last], fp[last]
    ok = tp / n_pos >= target_recall - 1e-12
    return float(np.max(tp[ok] / (tp[ok] + fp[ok])))


def confusion_matrix(labels, predicted, num_classes: int | None = None) -> np.ndarray:
    labels, predicted = np.asarray(labels, dtype=np.int64), np.asarray(predicted, dtype=np.int64)
    c = num_classes or int(max(labels.max(), predicted.max())) + 1
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def classification_report(scored: ScoredPredictions, num_classes: int | None = None) -> tuple[float, float]:
    """(top-1 accuracy, macro-F1). Classes absent from the labels are left out of the mean."""
    pred = scored.predicted_class
    if pred is None:
        raise ValueError("classification_report needs predicted_class")
    if len(scored.labels) == 0:
        raise ValueError("empty input")
    top1 = float(np.mean(pred == scored.labels))
    cm = confusion_matrix(scored.labels, pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support, predicted = cm.sum(axis=1), cm.sum(axis=0)
    f1 = np.divide(2 * tp, support + predicted, out=np.zeros_like(tp), where=(support + predicted) > 0)
    present = support > 0
    return top1, float(f1[present].mean())


def metrics_csv(rows, config_hash: str) -> str:
    """``metric,value,config_hash`` lines with a header, values at 6 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "config_hash"])
    for name, value in rows:
        w.writerow([name, f"{value:.6f}", config_hash])
    return buf.getvalue()
