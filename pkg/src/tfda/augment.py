"""Weak (jitter-and-scale) and strong (permutation-and-jitter) time-domain views.

Every call is a pure function of ``(policy, stream_id)`` so a batch can be
augmented in any order, or in parallel, and still come out bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mix(*keys: int) -> int:
    """Hash a tuple of non-negative integers into one 64-bit stream id."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "weak"
    jitter_sigma: float = 0.05
    scale_low: float = 0.9
    scale_high: float = 1.1
    max_segments: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")


WEAK = AugPolicy("weak", jitter_sigma=0.05, scale_low=0.9, scale_high=1.1)
STRONG = AugPolicy("strong", jitter_sigma=0.1, max_segments=5)


def _rng(policy: AugPolicy, stream_id: int) -> np.random.Generator:
    return np.random.default_rng([policy.seed & 0xFFFFFFFFFFFFFFFF, stream_id & 0xFFFFFFFFFFFFFFFF])


def _noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.zeros_like(x)
    return rng.standard_normal(x.shape) * (sigma * x.std(axis=-1, keepdims=True))


def jitter_scale(x: np.ndarray, policy: AugPolicy, stream_id: int) -> np.ndarray:
    """Scale a Ch x S sample by s ~ U(low, high) and add per-channel Gaussian jitter."""
    if policy.kind != "weak":
        raise ValueError("jitter_scale needs a weak policy")
    rng = _rng(policy, stream_id)
    s = rng.uniform(policy.scale_low, policy.scale_high)
    # noise std follows the un-scaled input
    return s * x + _noise(x, policy.jitter_sigma, rng)


def permute_jitter(x: np.ndarray, policy: AugPolicy, stream_id: int) -> np.ndarray:
    """Cut the time axis into m ~ U{1..max_segments} pieces, shuffle them, add jitter."""
    if policy.kind != "strong":
        raise ValueError("permute_jitter needs a strong policy")
    S = x.shape[-1]
    if policy.max_segments > S:
        raise ValueError("max_segments exceeds the sample length")
    rng = _rng(policy, stream_id)
    m = int(rng.integers(1, policy.max_segments + 1))
    if m > 1:
        cuts = np.sort(rng.choice(np.arange(1, S), size=m - 1, replace=False))
        pieces = np.split(x, cuts, axis=-1)
        order = rng.permutation(m)
        x = np.concatenate([pieces[i] for i in order], axis=-1)
    return x + _noise(x, policy.jitter_sigma, rng)


def augment_batch(x: np.ndarray, policy: AugPolicy, stream_ids) -> np.ndarray:
    fn = jitter_scale if policy.kind == "weak" else permute_jitter
    return np.stack([fn(xi, policy, sid) for xi, sid in zip(x, stream_ids)])
