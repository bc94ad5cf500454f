"""ROC curves and trapezoidal AUC."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Class index whose probability is used as the ROC score.
POSITIVE_CLASS = 1


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for row in zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()):
                w.writerow([repr(x) for x in row])
        return path


def roc_auc(scores, labels) -> RocResult:
    """ROC over every distinct score, ties grouped into one step.

    The first point is (0, 0) at threshold +inf; AUC is the trapezoid rule
    over the resulting curve, which counts tied positive/negative pairs as
    one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError(f"{scores.size} scores vs {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise EvaluationError("labels must be binary 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both classes present")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.float64)
    # Last index of each run of equal scores.
    last = np.flatnonzero(np.r_[np.diff(s) != 0, True])
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(thresholds, fpr, tpr, auc)


def positive_scores(logits) -> np.ndarray:
    """Softmax probability of the positive class for (m, 2) logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p[:, POSITIVE_CLASS] / p.sum(axis=1)


def write_summary(rows: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(rows, indent=1, sort_keys=True))
    return path
