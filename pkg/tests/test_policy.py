import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from cores import tensor as T
from cores.gnn import GnnConfig
from cores.graph import Graph, apply_action, batch
from cores.policy import SparsificationPolicy, act, act_batch, evaluate_action, evaluate_actions
from cores.tensor import ShapeError

CFG = GnnConfig(hidden_dim=8, num_layers=2)


def zero_actor(policy, bias=0.0):
    for k in ("actor1.weight", "actor1.bias"):
        policy.params[k].data[:] = 0.0
    policy.params["actor1.bias"].data[:] = bias


def test_zero_logits_log_prob_and_entropy():
    g = Graph(3, np.array([[0, 1], [1, 2]]), np.ones((3, 2)), 0)
    policy = SparsificationPolicy(CFG, 2, "node")
    zero_actor(policy)
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = act(policy, g, rng)
        assert s.log_prob == pytest.approx(3 * math.log(0.5), abs=1e-12)
    edge_policy = SparsificationPolicy(CFG, 2, "edge")
    zero_actor(edge_policy)
    g4 = Graph(4, np.array([[0, 1], [0, 2], [1, 2], [2, 3]]), np.ones((4, 2)), 0)
    assert act(edge_policy, g4, rng).entropy == pytest.approx(4 * math.log(2), abs=1e-9)


def test_forced_keep_returns_whole_graph(rng):
    policy = SparsificationPolicy(CFG, 3, "node")
    zero_actor(policy, bias=-np.inf)
    g = random_graph(rng, 4, 8)
    for deterministic in (True, False):
        s = act(policy, g, rng, deterministic)
        assert not s.mask.any()
        assert apply_action(g, "node", s.mask).node_ratio == 1.0
        assert np.isfinite(s.log_prob) and s.log_prob <= 0


def test_deterministic_threshold(rng):
    policy = SparsificationPolicy(CFG, 3, "node")
    zero_actor(policy, bias=0.1)
    assert act(policy, random_graph(rng), None, deterministic=True).mask.all()
    zero_actor(policy, bias=0.0)  # p = 0.5 exactly is not strictly above the threshold
    assert not act(policy, random_graph(rng), None, deterministic=True).mask.any()


@pytest.mark.parametrize("mode", ["node", "edge"])
def test_mask_lengths_and_log_prob_sign(mode, rng):
    policy = SparsificationPolicy(CFG, 3, mode, seed=3)
    graphs = [random_graph(rng, 2, 8, p=0.6) for _ in range(6)]
    for g, s in zip(graphs, act_batch(policy, graphs, rng)):
        assert len(s.mask) == (g.num_nodes if mode == "node" else g.num_edges)
        assert s.log_prob <= 0 and s.entropy >= 0


@pytest.mark.parametrize("mode", ["node", "edge"])
def test_evaluate_reproduces_stored_log_prob(mode, rng):
    policy = SparsificationPolicy(CFG, 3, mode, seed=5)
    graphs = [random_graph(rng, 2, 8, p=0.6) for _ in range(8)]
    samples = act_batch(policy, graphs, rng)
    lp, values, ent = evaluate_actions(policy, graphs, [s.mask for s in samples])
    np.testing.assert_allclose(lp.data.ravel(), [s.log_prob for s in samples], atol=1e-9)
    np.testing.assert_allclose(values.data.ravel(), [s.value for s in samples], atol=1e-12)
    np.testing.assert_allclose(ent.data.ravel(), [s.entropy for s in samples], atol=1e-9)
    single = evaluate_action(policy, graphs[0], samples[0].mask)[0].item()
    assert single == pytest.approx(samples[0].log_prob, abs=1e-9)


def test_log_prob_matches_direct_sum(rng):
    policy = SparsificationPolicy(CFG, 3, "node", seed=2)
    g = random_graph(rng, 5, 5)
    with T.no_grad():
        logits, _, _ = policy.heads(batch([g]))
    p = 1 / (1 + np.exp(-logits.data.ravel()))
    mask = np.array([1, 0, 1, 1, 0], bool)
    expected = np.sum(np.where(mask, np.log(p), np.log(1 - p)))
    assert evaluate_action(policy, g, mask)[0].item() == pytest.approx(expected, abs=1e-9)


def test_edge_logits_are_symmetric(rng):
    policy = SparsificationPolicy(CFG, 3, "edge", seed=1)
    states = T.Tensor(rng.normal(size=(4, 8)))
    a = policy.edge_logits(states, np.array([[0, 1], [2, 3]])).data
    b = policy.edge_logits(states, np.array([[1, 0], [3, 2]])).data
    np.testing.assert_array_equal(a, b)


def test_mask_length_mismatch(rng):
    policy = SparsificationPolicy(CFG, 3, "node")
    with pytest.raises(ShapeError):
        evaluate_action(policy, random_graph(rng, 4, 4), np.zeros(3, bool))


def test_empty_graph_rejected():
    policy = SparsificationPolicy(CFG, 2, "node")
    with pytest.raises(ShapeError):
        act(policy, Graph(0, np.zeros((0, 2)), np.zeros((0, 2)), 0), None, True)


def test_actor_and_critic_parameters_partition():
    policy = SparsificationPolicy(CFG, 3, "node")
    actor = {id(p) for p in policy.actor_parameters()}
    critic = {id(p) for p in policy.critic_parameters()}
    assert not actor & critic
    assert actor | critic == {id(p) for p in policy.parameters()}
    trunk = {id(p) for k, p in policy.params.items() if k.startswith("trunk.") and p.requires_grad}
    assert trunk and trunk <= actor


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_sampling_frequency_matches_probability(seed):
    rng = np.random.default_rng(seed)
    policy = SparsificationPolicy(CFG, 2, "node")
    bias = float(rng.uniform(-2, 2))
    zero_actor(policy, bias)
    g = Graph(1, np.zeros((0, 2)), np.ones((1, 2)), 0)
    masks = np.array([s.mask[0] for s in act_batch(policy, [g] * 2000, rng)])
    p = 1 / (1 + math.exp(-bias))
    assert abs(masks.mean() - p) < 5 * math.sqrt(p * (1 - p) / 2000) + 1e-9
