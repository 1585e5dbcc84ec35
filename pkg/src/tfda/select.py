"""Confidence / uncertainty based split of a batch into reliable and non-reliable parts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class ReliabilityPartition:
    reliable: np.ndarray
    non_reliable: np.ndarray
    tau_c: float
    tau_u: float
    confidences: np.ndarray
    uncertainties: np.ndarray
    flags: np.ndarray  # reliability before promotion


def prediction_stats(predict_fused: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     views: list) -> tuple[np.ndarray, np.ndarray]:
    """Confidence on the clean batch and std of confidence across augmented views.

    ``predict_fused`` maps a batch to fused class probabilities; ``views`` holds
    L >= 2 augmented copies of ``x``.
    """
    if len(views) < 2:
        raise ValueError("need at least two augmented views")
    conf = predict_fused(x).max(axis=1)
    view_conf = np.stack([predict_fused(v).max(axis=1) for v in views])
    return conf, confidence_spread(view_conf)


def confidence_spread(view_conf: np.ndarray) -> np.ndarray:
    """Population standard deviation over the view axis (axis 0)."""
    return np.asarray(view_conf, dtype=np.float64).std(axis=0)


def thresholds(confidences, uncertainties) -> tuple[float, float]:
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.size == 0:
        raise ValueError("thresholds of an empty batch")
    return float(confidences.mean()), float(np.mean(uncertainties))


def partition(confidences, uncertainties, tau_c: float, tau_u: float,
              predicted: Optional[np.ndarray] = None, promote: int = 2) -> ReliabilityPartition:
    """Reliable iff confident enough and stable enough; then the ``promote``
    most confident non-reliable samples of every predicted class join the
    reliable group."""
    conf = np.asarray(confidences, dtype=np.float64)
    unc = np.asarray(uncertainties, dtype=np.float64)
    if conf.shape != unc.shape:
        raise ValueError("confidences and uncertainties differ in length")
    flags = (conf >= tau_c) & (unc <= tau_u)
    reliable = flags.copy()
    if promote > 0:
        pred = np.zeros(conf.shape, dtype=np.int64) if predicted is None else np.asarray(predicted)
        for c in np.unique(pred[~flags]):
            cand = np.flatnonzero(~flags & (pred == c))
            best = cand[np.argsort(-conf[cand], kind="stable")[:promote]]
            reliable[best] = True
    return ReliabilityPartition(
        np.flatnonzero(reliable), np.flatnonzero(~reliable), float(tau_c), float(tau_u), conf, unc, flags
    )
