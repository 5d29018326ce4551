"""Bernoulli keep/remove policy over nodes or edges with a graph-level critic."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .gnn import GnnConfig, GnnTrunk, Module
from .graph import BatchedGraph, Graph, batch
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ActionSample:
    mask: np.ndarray  # True = remove
    log_prob: float
    value: float
    entropy: float


class SparsificationPolicy(Module):
    """GNN trunk shared by a per-unit actor head and a per-graph critic head.

    The trunk runs without batch norm or dropout so that re-evaluating a
    stored action reproduces its log-probability exactly.
    """

    def __init__(self, config: GnnConfig, in_dim: int, mode: str, seed: int = 0, init_bias: float = 0.0):
        super().__init__()
        if mode not in ("node", "edge"):
            raise ValueError(f"unknown mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.in_dim = in_dim
        self.config = replace(config, batch_norm=False, dropout=0.0)
        self.trunk = GnnTrunk(self.config, in_dim, rng)
        h = self.config.hidden_dim
        self.add_linear("actor0", rng, h if mode == "node" else 2 * h, h)
        self.add_linear("actor1", rng, h, 1)
        self.params["actor1.bias"].data[:] = init_bias
        self.add_linear("critic0", rng, h, h)
        self.add_linear("critic1", rng, h, 1)
        self.params.update({f"trunk.{k}": v for k, v in self.trunk.params.items()})

    def actor_parameters(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if not k.startswith("critic") and p.requires_grad]

    def critic_parameters(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.startswith("critic") and p.requires_grad]

    def edge_logits(self, states: Tensor, edges: np.ndarray) -> Tensor:
        """Per-edge logit from ``[h_u + h_v, h_u * h_v]``, symmetric in the endpoints."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        hu = T.take_rows(states, edges[:, 0])
        hv = T.take_rows(states, edges[:, 1])
        feats = T.concat_cols([T.add(hu, hv), T.mul(hu, hv)])
        return self.lin("actor1", T.relu(self.lin("actor0", feats)))

    def heads(self, g: BatchedGraph) -> tuple[Tensor, np.ndarray, Tensor]:
        """Logits (units x 1), unit-to-graph ids, and values (graphs x 1)."""
        states = self.trunk.forward(g, training=False)
        if self.mode == "node":
            logits = self.lin("actor1", T.relu(self.lin("actor0", states)))
            units = g.node_to_graph
        else:
            logits = self.edge_logits(states, g.edges)
            units = g.edge_to_graph
        pooled = T.segment_reduce(states, g.node_to_graph, "mean", g.num_graphs)
        values = self.lin("critic1", T.relu(self.lin("critic0", pooled)))
        return logits, units, values

    def num_units(self, graph: Graph) -> int:
        return graph.num_nodes if self.mode == "node" else graph.num_edges


def bernoulli_terms(logits: Tensor, mask: np.ndarray, units: np.ndarray, num_graphs: int) -> tuple[Tensor, Tensor]:
    """Per-graph sums of Bernoulli log-probabilities and entropies."""
    p = T.clip(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    q = T.sub(1.0, p)
    log_p, log_q = T.log(p), T.log(q)
    a = mask.astype(np.float64).reshape(-1, 1)
    unit_lp = T.add(T.mul(a, log_p), T.mul(1.0 - a, log_q))
    unit_ent = T.neg(T.add(T.mul(p, log_p), T.mul(q, log_q)))
    lp = T.segment_reduce(unit_lp, units, "sum", num_graphs)
    ent = T.segment_reduce(unit_ent, units, "sum", num_graphs)
    return lp, ent


def _split(flat: np.ndarray, units: np.ndarray, num_graphs: int) -> list[np.ndarray]:
    bounds = np.searchsorted(units, np.arange(num_graphs + 1))
    return [flat[bounds[i] : bounds[i + 1]] for i in range(num_graphs)]


def act_batch(
    policy: SparsificationPolicy,
    graphs: Sequence[Graph],
    rng: np.random.Generator | None,
    deterministic: bool = False,
) -> list[ActionSample]:
    """Sample (or threshold at 0.5) one removal mask per graph."""
    if any(g.num_nodes == 0 for g in graphs):
        raise ShapeError("cannot act on an empty graph")
    g = batch(graphs)
    with T.no_grad():
        logits, units, values = policy.heads(g)
        raw = T.sigmoid(logits).data.reshape(-1)
        if deterministic:
            mask = raw > 0.5
        else:
            mask = rng.uniform(size=raw.shape) < raw
        lp, ent = bernoulli_terms(logits, mask, units, g.num_graphs)
    masks = _split(mask, units, g.num_graphs)
    return [
        ActionSample(masks[i], float(lp.data[i, 0]), float(values.data[i, 0]), float(ent.data[i, 0]))
        for i in range(g.num_graphs)
    ]


def act(policy: SparsificationPolicy, graph: Graph, rng=None, deterministic: bool = False) -> ActionSample:
    return act_batch(policy, [graph], rng, deterministic)[0]


def evaluate_actions(
    policy: SparsificationPolicy, graphs: Sequence[Graph], masks: Sequence[np.ndarray]
) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable log-probabilities, values and entropies (each graphs x 1)."""
    for graph, mask in zip(graphs, masks):
        if len(mask) != policy.num_units(graph):
            raise ShapeError(f"mask of length {len(mask)} for a graph with {policy.num_units(graph)} units")
    g = batch(graphs)
    logits, units, values = policy.heads(g)
    flat = np.concatenate([np.asarray(m, dtype=bool) for m in masks]) if masks else np.zeros(0, dtype=bool)
    lp, ent = bernoulli_terms(logits, flat, units, g.num_graphs)
    return lp, values, ent


def evaluate_action(policy: SparsificationPolicy, graph: Graph, mask) -> tuple[Tensor, Tensor, Tensor]:
    return evaluate_actions(policy, [graph], [np.asarray(mask, dtype=bool)])
