"""Two-armed bandit analogue: one-node graphs, +1 for keeping the node, -1 for removing it."""

import numpy as np

from cores import tensor as T
from cores.gnn import GnnConfig
from cores.graph import Graph, batch
from cores.policy import SparsificationPolicy, act_batch
from cores.ppo import PpoConfig, RolloutBuffer, RolloutRecord, make_optimizer, update


def keep_probability(policy, graph):
    with T.no_grad():
        logits, _, _ = policy.heads(batch([graph]))
    return 1.0 - float(T.sigmoid(logits).data[0, 0])


def run_bandit(max_updates=200, rollouts=16, lr=0.01, seed=0):
    """Return (gradient steps used, final keep probability)."""
    graph = Graph(1, np.zeros((0, 2), dtype=np.int64), np.ones((1, 2)), 0)
    cfg = PpoConfig(policy_lr=lr, ppo_epochs=1, minibatch_size=rollouts, env_steps=rollouts, entropy_coef=0.0)
    policy = SparsificationPolicy(GnnConfig(hidden_dim=8, num_layers=1), 2, "node", seed=seed)
    opt = make_optimizer(policy, cfg)
    rng_act, rng_ppo = np.random.default_rng(seed), np.random.default_rng(seed + 1)
    steps = 0
    while steps < max_updates:
        if keep_probability(policy, graph) >= 0.95:
            break
        buffer = RolloutBuffer(rollouts)
        for s in act_batch(policy, [graph] * rollouts, rng_act):
            buffer.add(RolloutRecord(0, s.mask, s.log_prob, s.value, -1.0 if s.mask[0] else 1.0))
        steps += update(policy, buffer, [graph], cfg, rng_ppo, opt).num_updates
    return steps, keep_probability(policy, graph)
