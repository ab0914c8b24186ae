"""Classification metrics shared by training and evaluation."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(preds, labels) -> float:
    """Fraction of matching labels; probabilities are thresholded at 0.5."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0 or p.size != y.size:
        raise ValueError("accuracy needs two non-empty vectors of equal length")
    return float(np.mean((p >= 0.5).astype(int) == y.astype(int)))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(int)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        raise ValueError("auc needs both classes (labels in {0, 1})")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
