"""Per-epoch schedule of the loss coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class CurriculumState:
    mu_r: float = 1.0
    mu_c: float = 0.5
    mu_cons: float = 0.5
    mu_u: float = 0.5
    epoch: int = 0
    alpha_r: float = 0.005
    beta_decay: float = 1e-4


def step_mu_r(state: CurriculumState, tau_c: float, tau_u: float) -> CurriculumState:
    """mu_r <- mu_r * (1 - alpha * exp(-1/d)) with difficulty d = tau_u / tau_c."""
    if tau_c <= 0:
        raise ValueError("mean confidence must be positive")
    d = tau_u / tau_c
    factor = 1.0 - state.alpha_r * (math.exp(-1.0 / d) if d > 0 else 0.0)
    return replace(state, mu_r=state.mu_r * factor)


def decay_aux(state: CurriculumState) -> CurriculumState:
    f = math.exp(-state.beta_decay)
    return replace(state, mu_c=state.mu_c * f, mu_cons=state.mu_cons * f, mu_u=state.mu_u * f)


def advance(state: CurriculumState, tau_c: float, tau_u: float) -> CurriculumState:
    """End-of-epoch update from the epoch-mean thresholds."""
    return replace(decay_aux(step_mu_r(state, tau_c, tau_u)), epoch=state.epoch + 1)
