import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cores.conformal import (
    CalibrationError,
    CalibrationState,
    aps_score,
    aps_scores_all,
    calibrate,
    prediction_set,
)

ORACLE_TRIALS = 10_000


def test_aps_score_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(ORACLE_TRIALS):
        p = oracles.random_probs(rng)
        y = int(rng.integers(len(p)))
        assert abs(aps_score(p, y) - oracles.aps_score(p, y)) < 1e-9


def test_calibrate_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(ORACLE_TRIALS):
        n = int(rng.integers(1, 40))
        scores = list(rng.uniform(size=n).round(int(rng.integers(1, 6))))
        alpha = float(rng.choice([0.05, 0.1, 0.2, 0.3, rng.uniform(0.01, 0.99)]))
        q, ref = calibrate(scores, alpha).quantile, oracles.quantile(scores, alpha)
        assert (math.isinf(q) and math.isinf(ref)) or abs(q - ref) < 1e-9


def test_prediction_set_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(ORACLE_TRIALS):
        p = oracles.random_probs(rng)
        q = float(rng.uniform(0, 1.05))
        assert set(prediction_set(p, q).classes) == oracles.prediction_set(p, q)


def test_scores_are_cumulative_mass():
    p = np.array([0.1, 0.6, 0.3])
    np.testing.assert_allclose(aps_scores_all(p), [1.0, 0.6, 0.9])
    assert aps_score(p, 2) == pytest.approx(0.9)


def test_tied_probabilities_rank_lower_index_first():
    p = [0.25, 0.25, 0.5]
    assert aps_score(p, 0) == pytest.approx(0.75)
    assert aps_score(p, 1) == pytest.approx(1.0)


def test_quantile_rank():
    # n = 9, alpha = 0.1: rank ceil(10 * 0.9) = 9, the largest score
    state = calibrate([0.1 * i for i in range(1, 10)], 0.1)
    assert state.quantile == pytest.approx(0.9)
    # n = 3, alpha = 0.1: rank ceil(4 * 0.9) = 4 > 3
    assert math.isinf(calibrate([0.1, 0.2, 0.3], 0.1).quantile)


def test_infinite_quantile_gives_every_class():
    state = CalibrationState((0.5,), 0.1, math.inf)
    assert prediction_set([0.9, 0.05, 0.05], state).size == 3


def test_overconfident_prediction_gives_empty_set():
    # the top class alone already exceeds the threshold
    assert prediction_set([0.95, 0.05], 0.9).size == 0


def test_calibrate_rejects_bad_input():
    with pytest.raises(CalibrationError):
        calibrate([], 0.1)
    with pytest.raises(CalibrationError):
        calibrate([0.5], 0.0)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50), st.floats(0.01, 0.99))
def test_quantile_is_a_calibration_score_or_inf(scores, alpha):
    q = calibrate(scores, alpha).quantile
    assert math.isinf(q) or q in scores


@given(st.integers(2, 6), st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_sets_grow_with_threshold(k, seed, q1, q2):
    p = oracles.random_probs(np.random.default_rng(seed), k)
    lo, hi = sorted((q1, q2))
    assert prediction_set(p, lo).classes <= prediction_set(p, hi).classes


def synthetic_coverage(alpha, trials=2000, n_cal=100, k=4, seed=0):
    """Calibrate and test on exchangeable draws from a fixed softmax classifier."""
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(3, k))

    def draw(n):
        x = rng.normal(size=(n, 3))
        logits = x @ weights
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        # labels sampled from a tempered version so the classifier is imperfect
        true = np.exp(0.5 * logits)
        true /= true.sum(axis=1, keepdims=True)
        labels = (rng.uniform(size=(n, 1)) > np.cumsum(true, axis=1)).sum(axis=1)
        return probs, labels

    hits = 0
    for _ in range(trials):
        probs, labels = draw(n_cal + 1)
        state = calibrate([aps_score(p, y) for p, y in zip(probs[:-1], labels[:-1])], alpha)
        hits += labels[-1] in prediction_set(probs[-1], state)
    return hits / trials


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
def test_marginal_coverage(alpha):
    bound = 1 - alpha - 3 * math.sqrt(alpha * (1 - alpha) / 2000)
    assert synthetic_coverage(alpha) >= bound
