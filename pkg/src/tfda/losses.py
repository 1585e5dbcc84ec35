"""Adaptation objectives.  Every loss takes and returns diffcore tensors."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def class_balanced_ce(probs: Tensor, labels, class_counts) -> Tensor:
    """Mean of w[y] * -log p[y] with w_c = N / (C_present * n_c)."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("class_balanced_ce needs at least one non-zero class count")
    present = np.count_nonzero(counts)
    w = np.divide(counts.sum(), present * counts, out=np.zeros_like(counts), where=counts > 0)
    if len(labels) == 0:
        return Tensor(0.0)
    picked = dc.take(probs, (np.arange(len(labels)), labels))
    return dc.mean(dc.log(picked, clamp=1e-12) * (-w[labels]))


def label_propagation(probs: Tensor, targets) -> Tensor:
    """Half the mean Euclidean distance between predictions and one-hot targets."""
    n = probs.shape[0]
    if n == 0:
        return Tensor(0.0)
    onehot = np.eye(probs.shape[1])[np.asarray(targets, dtype=np.int64)]
    return dc.sum_(dc.l2_norm(probs - onehot, axis=1)) * (1.0 / (2 * n))


def info_nce_masked(q: Tensor, k_pos: Tensor, keys, mask: Optional[np.ndarray], tau: float = 0.07) -> Tensor:
    """Batch-mean InfoNCE with the positive in the denominator.

    q, k_pos: B x D unit rows; keys: Q x D negatives (array or tensor);
    mask: B x Q, True where the key counts as a negative for that query.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    q = dc.as_tensor(q)
    if q.ndim == 1:
        q = dc.reshape(q, (1, -1))
        k_pos = dc.reshape(dc.as_tensor(k_pos), (1, -1))
        if mask is not None:
            mask = np.asarray(mask).reshape(1, -1)
    B = q.shape[0]
    if B == 0:
        return Tensor(0.0)
    pos = dc.reshape(dc.sum_(q * k_pos, axis=1) * (1.0 / tau), (B, 1))
    keys = dc.as_tensor(keys)
    cols, keep = [pos], [np.ones((B, 1), dtype=bool)]
    if keys.shape[0]:
        cols.append(dc.matmul(q, dc.transpose(keys)) * (1.0 / tau))
        keep.append(np.ones((B, keys.shape[0]), dtype=bool) if mask is None else np.asarray(mask, dtype=bool))
    logits = dc.concat(cols, axis=1)
    lse = dc.logsumexp(logits, axis=1, where=np.concatenate(keep, axis=1))
    return dc.mean(lse - dc.reshape(pos, (B,)))


def info_nce(q_sim_pos: float, neg_sims, tau: float = 1.0) -> float:
    """Scalar form from precomputed similarities (for quick checks)."""
    logits = np.concatenate([[q_sim_pos], np.asarray(neg_sims, dtype=np.float64)]) / tau
    m = logits.max()
    return float(np.log(np.exp(logits - m).sum()) + m - logits[0])


def combined_contrastive(l_time, l_freq, l_joint, alpha1: float = 0.5, alpha2: float = 0.5):
    l_all = (l_freq + l_time) * alpha1 + l_joint * alpha2
    return l_time, l_freq, l_joint, l_all


def consistency_kl(p_time: Tensor, p_freq: Tensor, eps: float = 1e-8) -> Tensor:
    """Batch mean of KL(p || q) + KL(q || p), logs clamped at ``eps``."""
    if p_time.shape[0] == 0:
        return Tensor(0.0)
    lp = dc.log(p_time, clamp=eps)
    lq = dc.log(p_freq, clamp=eps)
    return dc.mean(dc.sum_((p_time - p_freq) * (lp - lq), axis=1))


def entropy_weights(h: np.ndarray) -> np.ndarray:
    """n * (1 + exp(-H_i)) / sum_j (1 + exp(-H_j))."""
    h = np.asarray(h, dtype=np.float64)
    plogp = np.where(h > 0, h * np.log(np.where(h > 0, h, 1.0)), 0.0)
    ent = -plogp.sum(axis=1)
    s = 1.0 + np.exp(-ent)
    return len(h) * s / s.sum()


def tsallis_uncertainty(h: Tensor, a: float = 2.0, eta: Optional[np.ndarray] = None,
                        col: Optional[np.ndarray] = None) -> Tensor:
    """Entropy-weighted, class-normalised Tsallis objective.

    The sample weights ``eta`` and per-class column sums ``col`` are treated as
    constants; by default they are computed from the detached probabilities.
    """
    if a <= 1:
        raise ValueError("Tsallis exponent must be > 1")
    n, C = h.shape
    if n == 0:
        return Tensor(0.0)
    eta = entropy_weights(h.data) if eta is None else np.asarray(eta, dtype=np.float64)
    col = h.data.sum(axis=0) if col is None else np.asarray(col, dtype=np.float64)
    inv = np.divide(1.0, col, out=np.zeros_like(col), where=col > 0)
    terms = (h ** a) * (eta[:, None] * inv[None, :])
    return dc.sum_(terms) * (-1.0 / ((a - 1) * C))


@dataclass
class LossBundle:
    ce: float = 0.0
    lp: float = 0.0
    cl_time: float = 0.0
    cl_freq: float = 0.0
    cl_tf: float = 0.0
    cl: float = 0.0
    cons: float = 0.0
    ul: float = 0.0
    total: float = 0.0

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[float]:
        return [getattr(self, n) for n in self.names()]


def total_loss(ce, lp, cl, cons, ul, mu_r: float, mu_c: float, mu_cons: float, mu_u: float):
    return ce * mu_r + lp * (1.0 - mu_r) + cl * mu_c + cons * mu_cons + ul * mu_u
