"""GIN/GCN message passing, pooling, and the graph classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import BatchedGraph
from .tensor import ShapeError, Tensor

POOLINGS = ("mean", "add")


@dataclass
class GnnConfig:
    architecture: str = "GIN"
    num_layers: int = 3
    hidden_dim: int = 32
    dropout: float = 0.0
    batch_norm: bool = True
    pooling: tuple[str, ...] = ("mean", "add")
    gin_epsilon: float = 0.0
    gin_epsilon_trainable: bool = False
    num_classes: int = 2
    # GAT attention heads; kept so every tabulated setting loads, unused by GIN/GCN
    num_heads: int = 1

    def __post_init__(self):
        self.pooling = tuple(self.pooling)
        if self.architecture not in ("GIN", "GCN"):
            raise ValueError(f"unsupported architecture {self.architecture!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        if not self.pooling or any(p not in POOLINGS for p in self.pooling):
            raise ValueError(f"pooling must be a nonempty subset of {POOLINGS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pooling"] = list(self.pooling)
        return d


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)


class Module:
    """Named parameters plus non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_linear(self, name: str, rng, fan_in: int, fan_out: int) -> None:
        self.params[f"{name}.weight"] = glorot(rng, fan_in, fan_out)
        self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def lin(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def parameters(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | {f"buffer:{k}" for k in self.buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer:{k}"], dtype=np.float64)


class GnnTrunk(Module):
    """Stack of GIN or GCN layers, each followed by optional batch norm, ReLU and dropout."""

    def __init__(self, config: GnnConfig, in_dim: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        h = config.hidden_dim
        for layer in range(config.num_layers):
            d_in = in_dim if layer == 0 else h
            if config.architecture == "GIN":
                self.add_linear(f"conv{layer}.mlp0", rng, d_in, h)
                self.add_linear(f"conv{layer}.mlp1", rng, h, h)
                self.params[f"conv{layer}.eps"] = Tensor(
                    config.gin_epsilon, requires_grad=config.gin_epsilon_trainable
                )
            else:
                self.add_linear(f"conv{layer}", rng, d_in, h)
            if config.batch_norm:
                self.params[f"bn{layer}.gamma"] = Tensor(np.ones(h), requires_grad=True)
                self.params[f"bn{layer}.beta"] = Tensor(np.zeros(h), requires_grad=True)
                self.buffers[f"bn{layer}.running_mean"] = np.zeros(h)
                self.buffers[f"bn{layer}.running_var"] = np.ones(h)

    def forward(self, g: BatchedGraph, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if g.num_graphs == 0 or g.num_nodes == 0:
            raise ShapeError("empty batch")
        if g.node_features.shape[1] != self.in_dim:
            raise ShapeError(f"feature dim {g.node_features.shape[1]} != model input dim {self.in_dim}")
        cfg = self.config
        h = Tensor(g.node_features)
        for layer in range(cfg.num_layers):
            if cfg.architecture == "GIN":
                agg = gin_aggregate(h, g, self.params[f"conv{layer}.eps"])
                h = self.lin(f"conv{layer}.mlp1", T.relu(self.lin(f"conv{layer}.mlp0", agg)))
            else:
                h = self.lin(f"conv{layer}", gcn_propagate(h, g))
            if cfg.batch_norm:
                h = T.batch_norm(
                    h,
                    self.params[f"bn{layer}.gamma"],
                    self.params[f"bn{layer}.beta"],
                    self.buffers[f"bn{layer}.running_mean"],
                    self.buffers[f"bn{layer}.running_var"],
                    training=training,
                )
            h = T.relu(h)
            if training and cfg.dropout > 0:
                h = dropout(h, cfg.dropout, rng)
        return h


def gin_aggregate(h: Tensor, g: BatchedGraph, eps) -> Tensor:
    """``(1 + eps) * h_i + sum_{j in N(i)} h_j`` over both directions of each edge."""
    neighbours = T.spmm(g.adjacency, h)
    return T.add(T.mul(T.add(eps, 1.0), h), neighbours)


def gcn_propagate(h: Tensor, g: BatchedGraph) -> Tensor:
    return T.spmm(g.gcn_adjacency, h)


def dropout(h: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.uniform(size=h.shape) >= rate) / (1.0 - rate)
    return T.mul(h, keep)


def global_pool(h: Tensor, g: BatchedGraph, pooling: Sequence[str]) -> Tensor:
    parts = [
        T.segment_reduce(h, g.node_to_graph, "sum" if p == "add" else "mean", g.num_graphs) for p in pooling
    ]
    return parts[0] if len(parts) == 1 else T.concat_cols(parts)


class GraphClassifier(Module):
    """Trunk, global pooling, and a one-hidden-layer MLP head producing K logits."""

    def __init__(self, config: GnnConfig, in_dim: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.in_dim = in_dim
        self.trunk = GnnTrunk(config, in_dim, rng)
        pooled = config.hidden_dim * len(config.pooling)
        self.add_linear("head0", rng, pooled, config.hidden_dim)
        self.add_linear("head1", rng, config.hidden_dim, config.num_classes)
        # shared objects: loading into these updates the trunk as well
        self.params.update({f"trunk.{k}": v for k, v in self.trunk.params.items()})
        self.buffers = self.trunk.buffers

    def forward(self, g: BatchedGraph, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = self.trunk.forward(g, training, rng)
        pooled = global_pool(h, g, self.config.pooling)
        z = T.relu(self.lin("head0", pooled))
        if training and self.config.dropout > 0:
            z = dropout(z, self.config.dropout, rng)
        return self.lin("head1", z)

    def predict_proba(self, g: BatchedGraph) -> np.ndarray:
        with T.no_grad():
            return T.softmax_rows(self.forward(g, training=False)).data


def forward(model: GraphClassifier, g: BatchedGraph, training: bool = False, rng=None) -> Tensor:
    return model.forward(g, training, rng)


def predict_proba(model: GraphClassifier, g: BatchedGraph) -> np.ndarray:
    return model.predict_proba(g)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {logits.shape[0]} rows")
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label outside [0, {k})")
    return T.neg(T.mean(T.pick(T.log_softmax_rows(logits), labels)))
