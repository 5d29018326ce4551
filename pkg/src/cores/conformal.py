"""Adaptive prediction sets: scores, finite-sample calibration, set construction.

Sets are built without randomization. With two classes the only possible
sets are the empty set, the top class alone, or both classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationState:
    scores: tuple[float, ...]
    alpha_conf: float
    quantile: float  # math.inf when the rank exceeds the number of scores


@dataclass(frozen=True)
class PredictionSet:
    classes: frozenset[int]

    @property
    def size(self) -> int:
        return len(self.classes)

    def __contains__(self, label: int) -> bool:
        return label in self.classes


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # stable sort on -p keeps lower class indices first among ties
    return np.argsort(-probs, kind="stable")


def aps_score(probs: Sequence[float], label: int) -> float:
    """Probability mass of every class ranked at or above ``label``."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < len(p):
        raise IndexError(f"label {label} outside [0, {len(p)})")
    order = _descending_order(p)
    rank = int(np.flatnonzero(order == label)[0])
    return float(np.cumsum(p[order])[rank])


def aps_scores_all(probs: Sequence[float]) -> np.ndarray:
    """APS score of every class at once, indexed by class."""
    p = np.asarray(probs, dtype=np.float64)
    order = _descending_order(p)
    out = np.empty_like(p)
    out[order] = np.cumsum(p[order])
    return out


def calibrate(scores: Sequence[float], alpha_conf: float) -> CalibrationState:
    """Take the ceil((n+1)(1-alpha))-th smallest score as the threshold."""
    s = sorted(float(x) for x in scores)
    n = len(s)
    if n == 0:
        raise CalibrationError("no calibration scores")
    if not 0.0 < alpha_conf < 1.0:
        raise CalibrationError(f"alpha_conf must lie in (0, 1), got {alpha_conf}")
    k = math.ceil((n + 1) * (1.0 - alpha_conf) - 1e-12)
    q = s[k - 1] if k <= n else math.inf
    return CalibrationState(tuple(s), alpha_conf, q)


def prediction_set(probs: Sequence[float], state: CalibrationState | float) -> PredictionSet:
    q = state.quantile if isinstance(state, CalibrationState) else float(state)
    p = np.asarray(probs, dtype=np.float64)
    if math.isinf(q):
        return PredictionSet(frozenset(range(len(p))))
    scores = aps_scores_all(p)
    return PredictionSet(frozenset(int(c) for c in np.flatnonzero(scores <= q)))
