"""Macro-F1 and confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray  # rows = truth, columns = prediction
    n_evaluated: int


def macro_f1(y_true, y_pred, C: int) -> MetricsReport:
    """Unweighted mean of per-class F1 over all ``C`` classes (0/0 counts as 0)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= C):
            raise ValueError(f"{name} has labels outside [0, {C})")
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1)  # (tp+fp) + (tp+fn)
    f1 = np.divide(2 * tp, denom, out=np.zeros(C), where=denom > 0)
    return MetricsReport(float(f1.mean()), f1, conf, int(y_true.size))
