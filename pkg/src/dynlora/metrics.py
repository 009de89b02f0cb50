"""Classification metrics: accuracy, macro recall/F1, one-vs-rest AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError
from .tensor import softmax


@dataclass
class MetricReport:
    accuracy: float
    auc: float
    f1_macro: float
    recall_macro: float
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


def precision_recall_f1(cm: np.ndarray, c: int) -> tuple[float, float, float]:
    tp = cm[c, c]
    fp = cm[:, c].sum() - tp
    fn = cm[c, :].sum() - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(precision), float(recall), float(f1)


def mann_whitney_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(logits: np.ndarray, labels: Sequence[int]) -> MetricReport:
    """Macro-averaged report over the classes present in ``labels``.

    Classes absent from ``labels`` are left out of every macro average and a
    warning is recorded. A class that is the only one present has no
    negatives, so it is also skipped for AUC.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != y.size:
        raise ShapeError(f"{logits.shape} logits for {y.size} labels")
    n_classes = logits.shape[1]
    pred = np.argmax(logits, axis=1)
    cm = confusion_matrix(pred, y, n_classes)
    probs = softmax(logits)
    warnings = []
    present = [c for c in range(n_classes) if cm[c].sum() > 0]
    for c in range(n_classes):
        if c not in present:
            warnings.append(f"class {c} absent from labels; excluded from macro averages")
    recalls, f1s, aucs = [], [], []
    for c in present:
        _, r, f = precision_recall_f1(cm, c)
        recalls.append(r)
        f1s.append(f)
        auc = mann_whitney_auc(probs[:, c], y == c)
        if not np.isnan(auc):
            aucs.append(auc)
    return MetricReport(
        accuracy=float(np.mean(pred == y)) if y.size else 0.0,
        auc=float(np.mean(aucs)) if aucs else float("nan"),
        f1_macro=float(np.mean(f1s)) if f1s else 0.0,
        recall_macro=float(np.mean(recalls)) if recalls else 0.0,
        warnings=warnings,
    )
