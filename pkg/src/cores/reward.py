"""Conformal reward combining classifier confidence with subgraph sparsity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .conformal import PredictionSet

ANCHOR = 0.95
D_MIN, D_MAX = 0.01, 0.99


@dataclass
class RewardConfig:
    lam: float = 0.0
    desired_ratio: float = 0.5
    env_penalty: float = 0.5
    alpha_conf: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.env_penalty < 0:
            raise ValueError("env_penalty must be non-negative")
        if not 0.0 < self.alpha_conf < 1.0:
            raise ValueError("alpha_conf must lie in (0, 1)")
        self.desired_ratio = min(max(self.desired_ratio, D_MIN), D_MAX)


@dataclass(frozen=True)
class RewardBreakdown:
    r_perf: float
    r_sparse: float
    set_size: int
    in_set: bool
    total: float
    case: str  # certain | uncertain | miss | invalid


def sparsity_exponent(d: float) -> float:
    """Exponent that makes ``1 - d ** exponent`` equal the 0.95 anchor."""
    d = min(max(d, D_MIN), D_MAX)
    return math.log(1.0 - ANCHOR) / math.log(d)


def sparsity_reward(ratio: float, d: float) -> float:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"kept ratio must lie in (0, 1], got {ratio}")
    return 1.0 - ratio ** sparsity_exponent(d)


def performance_reward(probs: Sequence[float], label: int) -> float:
    if not 0 <= label < len(probs):
        raise IndexError(f"label {label} outside [0, {len(probs)})")
    return float(probs[label])


def compute_reward(
    probs: Sequence[float] | None,
    label: int,
    ratio: float,
    pset: PredictionSet | None,
    cfg: RewardConfig,
    valid: bool = True,
) -> RewardBreakdown:
    if not valid:
        return RewardBreakdown(0.0, 0.0, 0, False, -cfg.env_penalty, "invalid")
    r_perf = performance_reward(probs, label)
    r_sparse = sparsity_reward(ratio, cfg.desired_ratio)
    in_set = label in pset
    if in_set and pset.size == 1:
        total, case = cfg.lam * r_perf + (1.0 - cfg.lam) * r_sparse, "certain"
    elif in_set:
        total, case = r_perf / pset.size, "uncertain"
    else:
        total, case = -r_sparse, "miss"
    return RewardBreakdown(r_perf, r_sparse, pset.size, in_set, total, case)
