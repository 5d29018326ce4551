"""One-step PPO: rollout buffer, advantages, clipped surrogate, and the update phase."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import Graph
from .policy import SparsificationPolicy, evaluate_actions
from .tensor import ShapeError, Tensor

ADV_EPS = 1e-8


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.001
    value_coef: float = 1.0
    ppo_epochs: int = 15
    minibatch_size: int = 32
    policy_lr: float = 0.0005
    critic_lr_ratio: float = 3.0
    advantage_normalization: bool = True
    env_steps: int = 128

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.ppo_epochs < 1:
            raise ValueError("ppo_epochs must be at least 1")
        if self.minibatch_size < 1 or self.env_steps < 1:
            raise ValueError("minibatch_size and env_steps must be positive")
        if self.policy_lr <= 0 or self.critic_lr_ratio <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class RolloutRecord:
    graph_id: int
    mask: np.ndarray
    log_prob: float
    value: float
    reward: float
    set_size: int = 0


class BufferStateError(RuntimeError):
    pass


@dataclass
class RolloutBuffer:
    capacity: int
    records: list[RolloutRecord] = field(default_factory=list)

    def add(self, record: RolloutRecord) -> None:
        if len(self.records) >= self.capacity:
            raise BufferStateError(f"buffer full ({self.capacity} records)")
        self.records.append(record)

    def full(self) -> bool:
        return len(self.records) >= self.capacity

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=np.float64)

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records], dtype=np.float64)

    def log_probs(self) -> np.ndarray:
        return np.array([r.log_prob for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class PpoStats:
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float
    first_ratio_deviation: float  # max |r - 1| on the very first minibatch
    num_updates: int


def compute_advantages(buffer: RolloutBuffer | Sequence[RolloutRecord], normalize: bool) -> np.ndarray:
    records = buffer.records if isinstance(buffer, RolloutBuffer) else list(buffer)
    if not records:
        raise BufferStateError("cannot compute advantages of an empty buffer")
    adv = np.array([r.reward - r.value for r in records], dtype=np.float64)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + ADV_EPS)
    return adv


def clipped_surrogate(ratio, advantage, eps: float) -> np.ndarray:
    """Elementwise ``min(r A, clip(r, 1-eps, 1+eps) A)`` on plain arrays."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


def _column(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1, 1)


def ppo_loss(
    new_log_probs: Tensor,
    old_log_probs,
    advantages,
    new_values: Tensor,
    rewards,
    entropies: Tensor,
    cfg: PpoConfig,
) -> Tensor:
    """Negative clipped surrogate plus weighted value error minus weighted entropy."""
    old, adv, ret = _column(old_log_probs), _column(advantages), _column(rewards)
    n = old.shape[0]
    for name, t in (("new_log_probs", new_log_probs), ("new_values", new_values), ("entropies", entropies)):
        if t.size != n:
            raise ShapeError(f"{name} has {t.size} entries, expected {n}")
    if adv.shape[0] != n or ret.shape[0] != n:
        raise ShapeError("advantages and rewards must align with log-probabilities")
    new_lp, values, ent = (T.reshape(t, (n, 1)) for t in (new_log_probs, new_values, entropies))
    eps = cfg.clip_epsilon
    ratio = T.exp(T.sub(new_lp, old))
    surrogate = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1 - eps, 1 + eps), adv))
    diff = T.sub(values, ret)
    loss = T.neg(T.mean(surrogate))
    loss = T.add(loss, T.mul(cfg.value_coef, T.mean(T.mul(diff, diff))))
    return T.sub(loss, T.mul(cfg.entropy_coef, T.mean(ent)))


def make_optimizer(policy: SparsificationPolicy, cfg: PpoConfig) -> T.Adam:
    """Adam over the actor (incl. shared trunk) at ``policy_lr`` and the critic head at ``policy_lr * ratio``."""
    return T.Adam(
        [(policy.actor_parameters(), 1.0), (policy.critic_parameters(), cfg.critic_lr_ratio)],
        lr=cfg.policy_lr,
    )


def update(
    policy: SparsificationPolicy,
    buffer: RolloutBuffer,
    graphs: Sequence[Graph],
    cfg: PpoConfig,
    rng: np.random.Generator,
    optimizer: T.Adam | None = None,
) -> PpoStats:
    """Run ``ppo_epochs`` passes of shuffled minibatch steps, then empty the buffer.

    ``graphs`` is indexed by each record's ``graph_id``.
    """
    if len(buffer) == 0:
        raise BufferStateError("cannot update from an empty buffer")
    optimizer = optimizer or make_optimizer(policy, cfg)
    records = list(buffer.records)
    adv = compute_advantages(records, cfg.advantage_normalization)
    rewards = np.array([r.reward for r in records])
    old_lp = np.array([r.log_prob for r in records])
    n = len(records)
    surr, vloss, ent, clipped, count = [], [], [], 0, 0
    first_dev = None
    steps = 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            mb_graphs = [graphs[records[i].graph_id] for i in idx]
            mb_masks = [records[i].mask for i in idx]
            new_lp, values, entropies = evaluate_actions(policy, mb_graphs, mb_masks)
            ratio = np.exp(new_lp.data.reshape(-1) - old_lp[idx])
            if first_dev is None:
                first_dev = float(np.max(np.abs(ratio - 1.0)))
            loss = ppo_loss(new_lp, old_lp[idx], adv[idx], values, rewards[idx], entropies, cfg)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite PPO loss on graphs {[records[i].graph_id for i in idx]}")
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step()
            steps += 1
            surr.append(float(np.mean(clipped_surrogate(ratio, adv[idx], cfg.clip_epsilon))))
            vloss.append(float(np.mean((values.data.reshape(-1) - rewards[idx]) ** 2)))
            ent.append(float(np.mean(entropies.data)))
            clipped += int(np.sum(np.abs(ratio - 1.0) > cfg.clip_epsilon))
            count += len(idx)
    buffer.clear()
    return PpoStats(
        surrogate=float(np.mean(surr)),
        value_loss=float(np.mean(vloss)),
        entropy=float(np.mean(ent)),
        clip_fraction=clipped / count,
        first_ratio_deviation=float(first_dev),
        num_updates=steps,
    )
