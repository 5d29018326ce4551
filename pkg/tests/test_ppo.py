import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import bandit
import gradcheck
import oracles
from conftest import random_graph
from cores import tensor as T
from cores.gnn import GnnConfig
from cores.policy import SparsificationPolicy, act_batch, evaluate_action
from cores.ppo import (
    BufferStateError,
    PpoConfig,
    RolloutBuffer,
    RolloutRecord,
    clipped_surrogate,
    compute_advantages,
    make_optimizer,
    ppo_loss,
    update,
)
from cores.tensor import ShapeError

ORACLE_TRIALS = 10_000


def record(reward, value, gid=0, mask=(False,), lp=-0.7):
    return RolloutRecord(gid, np.array(mask), lp, value, reward)


def test_advantage_examples():
    np.testing.assert_allclose(compute_advantages([record(1.0, 0.4)], normalize=False), [0.6])
    adv = compute_advantages([record(1.0, 0.0), record(-1.0, 0.0)], normalize=True)
    np.testing.assert_allclose(adv, [1.0, -1.0], atol=1e-7)
    np.testing.assert_array_equal(compute_advantages([record(0.3, 0.3)] * 4, normalize=False), 0.0)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=2, max_size=40))
def test_normalized_advantages_are_standardized(pairs):
    adv = compute_advantages([record(r, v) for r, v in pairs], normalize=True)
    raw = np.array([r - v for r, v in pairs])
    assert abs(adv.mean()) < 1e-6
    if raw.std() > 1e-3:
        assert abs(adv.std() - 1.0) < 1e-6


def test_empty_buffer_errors():
    with pytest.raises(BufferStateError):
        compute_advantages(RolloutBuffer(4), normalize=True)


def test_buffer_capacity():
    buf = RolloutBuffer(1)
    buf.add(record(1.0, 0.0))
    assert buf.full
    with pytest.raises(BufferStateError):
        buf.add(record(1.0, 0.0))
    buf.clear()
    assert len(buf) == 0


def test_surrogate_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(ORACLE_TRIALS):
        r, a, eps = float(np.exp(rng.normal(scale=0.5))), float(rng.normal()), float(rng.uniform(0.05, 0.5))
        assert abs(float(clipped_surrogate(r, a, eps)) - oracles.surrogate(r, a, eps)) < 1e-9


def test_surrogate_examples():
    assert float(clipped_surrogate(1.5, 2.0, 0.2)) == pytest.approx(2.4)
    assert float(clipped_surrogate(1.5, -1.0, 0.2)) == pytest.approx(-1.5)


@given(st.floats(-10, 3), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_surrogate_is_bounded(log_r, adv, eps):
    r = math.exp(log_r)
    assert abs(float(clipped_surrogate(r, adv, eps))) <= max(r, 1 + eps) * abs(adv) + 1e-12


def test_loss_at_identity_ratio():
    n = 4
    adv = np.array([0.5, -1.0, 2.0, 0.1])
    lp = T.Tensor(np.full((n, 1), -1.3))
    values = T.Tensor(np.zeros((n, 1)))
    cfg = PpoConfig(entropy_coef=0.0, value_coef=0.0)
    loss = ppo_loss(lp, np.full(n, -1.3), adv, values, np.zeros(n), T.Tensor(np.zeros((n, 1))), cfg)
    assert loss.item() == pytest.approx(-adv.mean())


def test_loss_gradient_on_three_records():
    assert gradcheck.worst_error("ppo_loss", instances=10) < gradcheck.TOLERANCE


def test_loss_shape_mismatch():
    cfg = PpoConfig()
    t = T.Tensor(np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        ppo_loss(t, np.zeros(2), np.zeros(3), t, np.zeros(3), t, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_epsilon=1.0)
    with pytest.raises(ValueError):
        PpoConfig(ppo_epochs=0)


def _buffer(policy, graphs, rewards, rng):
    buf = RolloutBuffer(len(graphs))
    for i, (s, r) in enumerate(zip(act_batch(policy, graphs, rng), rewards)):
        buf.add(RolloutRecord(i, s.mask, s.log_prob, s.value, r))
    return buf


def test_first_minibatch_ratio_is_one(rng):
    policy = SparsificationPolicy(GnnConfig(hidden_dim=8), 3, "node", seed=1)
    graphs = [random_graph(rng, 3, 7) for _ in range(10)]
    buf = _buffer(policy, graphs, rng.normal(size=10), rng)
    stats = update(policy, buf, graphs, PpoConfig(ppo_epochs=3, minibatch_size=4), rng)
    assert stats.first_ratio_deviation < 1e-9
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert stats.num_updates == 3 * 3
    assert len(buf) == 0


def test_positive_advantage_raises_action_probability(rng):
    policy = SparsificationPolicy(GnnConfig(hidden_dim=8), 3, "node", seed=2)
    g = random_graph(rng, 4, 6)
    s = act_batch(policy, [g], rng)[0]
    buf = RolloutBuffer(1)
    buf.add(RolloutRecord(0, s.mask, s.log_prob, s.value - 1.0, s.value))  # advantage +1
    cfg = PpoConfig(ppo_epochs=1, advantage_normalization=False, entropy_coef=0.0)
    update(policy, buf, [g], cfg, rng)
    assert evaluate_action(policy, g, s.mask)[0].item() > s.log_prob


def test_zero_advantage_leaves_actor_unchanged(rng):
    policy = SparsificationPolicy(GnnConfig(hidden_dim=8), 3, "node", seed=3)
    graphs = [random_graph(rng, 3, 6) for _ in range(4)]
    samples = act_batch(policy, graphs, rng)
    buf = RolloutBuffer(4)
    for i, s in enumerate(samples):
        buf.add(RolloutRecord(i, s.mask, s.log_prob, s.value, s.value))
    actor0 = [p.data.copy() for k, p in policy.params.items() if k.startswith("actor")]
    cfg = PpoConfig(ppo_epochs=2, advantage_normalization=False, entropy_coef=0.0)
    update(policy, buf, graphs, cfg, rng)
    actor1 = [p.data for k, p in policy.params.items() if k.startswith("actor")]
    for a, b in zip(actor0, actor1):
        np.testing.assert_array_equal(a, b)


def test_critic_runs_at_scaled_learning_rate():
    policy = SparsificationPolicy(GnnConfig(hidden_dim=8), 3, "node")
    opt = make_optimizer(policy, PpoConfig(policy_lr=0.002, critic_lr_ratio=3.0))
    scales = {id(p): s for params, s in opt.groups for p in params}
    assert all(scales[id(p)] == 3.0 for p in policy.critic_parameters())
    assert all(scales[id(p)] == 1.0 for p in policy.actor_parameters())
    assert opt.lr == 0.002


def test_bandit_reaches_keep_probability():
    steps, keep = bandit.run_bandit(max_updates=200, seed=0)
    assert keep >= 0.95 and steps <= 200
