"""Bi-level training: classifier steps on policy subgraphs, conformal calibration, PPO on validation rewards."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .conformal import CalibrationState, aps_score, calibrate, prediction_set
from .gnn import GnnConfig, GraphClassifier, cross_entropy
from .graph import DatasetSplit, Graph, Subgraph, apply_action, batch
from .metrics import MetricsSink
from .policy import SparsificationPolicy, act_batch
from .ppo import PpoConfig, PpoStats, RolloutBuffer, RolloutRecord, make_optimizer, update
from .reward import RewardBreakdown, RewardConfig, compute_reward

LR_FLOOR = 1e-6
EVAL_CHUNK = 256


class DivergenceError(FloatingPointError):
    """Raised on a non-finite loss; ``dump`` describes the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class MetricsError(ValueError):
    pass


@dataclass
class TrainConfig:
    gnn: GnnConfig = field(default_factory=GnnConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    classifier_lr: float = 0.001
    classifier_scheduler_factor: float = 0.95
    rl_scheduler_factor: float = 0.9
    # epochs without a new best before a scheduler decays; 0 decays on every such epoch
    scheduler_patience: int = 10
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 0  # 0 disables early stopping
    ppo_patience: int = 10  # 0 never freezes the policy
    seed: int = 0
    mode: str = "node"
    splits: tuple[float, float, float] = (0.4, 0.5, 0.1)
    report_last_epoch: bool = False
    policy_init_bias: float = 0.0
    allow_lr_override: bool = False

    def __post_init__(self):
        self.splits = tuple(float(s) for s in self.splits)
        if self.mode not in ("node", "edge"):
            raise ValueError(f"mode must be node or edge, got {self.mode!r}")
        if self.classifier_lr <= 0:
            raise ValueError("classifier_lr must be positive")
        for name in ("classifier_scheduler_factor", "rl_scheduler_factor"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.early_stop_patience < 0 or self.ppo_patience < 0 or self.scheduler_patience < 0:
            raise ValueError("patience values must be non-negative")
        if self.classifier_lr < self.ppo.policy_lr and not self.allow_lr_override:
            raise ValueError(
                f"inner classifier_lr {self.classifier_lr} is below outer policy_lr {self.ppo.policy_lr}; "
                "set allow_lr_override to keep it"
            )


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    split: str
    accuracy: float
    mean_node_ratio: float
    mean_edge_ratio: float
    mean_reward: float = math.nan
    mean_set_size: float = math.nan
    coverage: float = math.nan
    losses: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def rows(self) -> Iterator[tuple[str, float]]:
        """(name, value) pairs for the metrics sink; undefined values are skipped."""
        base = {
            "accuracy": self.accuracy,
            "node_ratio": self.mean_node_ratio,
            "edge_ratio": self.mean_edge_ratio,
            "reward": self.mean_reward,
            "set_size": self.mean_set_size,
            "coverage": self.coverage,
        }
        for name, value in list(base.items()) + sorted(self.losses.items()):
            if math.isfinite(value):
                yield name, float(value)


@dataclass
class TrainResult:
    classifier: GraphClassifier
    policy: SparsificationPolicy | None
    history: list[EpochMetrics]
    best_epoch: int = 0
    calibration: CalibrationState | None = None
    selected: dict = field(default_factory=dict)  # split -> EpochMetrics of the reported epoch
    wall_clock_s: float = 0.0

    def __iter__(self):
        return iter((self.classifier, self.policy, self.history))


class Plateau:
    """Counts epochs since the last new best; fires once every ``patience + 1`` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Return (new best, scheduler should treat the epoch as improved)."""
        if value > self.best:
            self.best, self.stale = value, 0
            return True, True
        self.stale += 1
        if self.stale > self.patience:
            self.stale = 0
            return False, False
        return False, True


def step_scheduler(current_lr: float, factor: float, improved: bool) -> float:
    """Multiply by ``factor`` after a non-improving epoch, never dropping below 1e-6."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"scheduler factor must lie in (0, 1], got {factor}")
    if improved:
        return current_lr
    return max(current_lr * factor, LR_FLOOR)


# --- helpers ----------------------------------------------------------------


def _check_split(split: DatasetSplit, dataset: Sequence[Graph]) -> None:
    ids = list(split.train) + list(split.val) + list(split.test)
    if not split.train:
        raise ValueError("training split is empty")
    if len(set(ids)) != len(ids):
        raise ValueError("train/val/test splits overlap")
    if ids and (min(ids) < 0 or max(ids) >= len(dataset)):
        raise IndexError("split refers to graphs outside the dataset")


def _chunks(seq: Sequence, size: int) -> Iterator[Sequence]:
    for start in range(0, len(seq), size):
        yield seq[start : start + size]


def _subgraphs(
    policy: SparsificationPolicy | None,
    graphs: Sequence[Graph],
    mode: str,
    deterministic: bool,
    rng: np.random.Generator | None,
) -> tuple[list[Subgraph], list]:
    if policy is None:
        keep = [apply_action(g, mode, np.zeros(g.num_nodes if mode == "node" else g.num_edges, bool)) for g in graphs]
        return keep, [None] * len(graphs)
    samples = act_batch(policy, graphs, rng, deterministic)
    return [apply_action(g, mode, s.mask) for g, s in zip(graphs, samples)], samples


def _predict(classifier: GraphClassifier, subs: Sequence[Subgraph]) -> np.ndarray:
    """Eval-mode class probabilities, one row per subgraph."""
    out = [classifier.predict_proba(batch(chunk)) for chunk in _chunks(list(subs), EVAL_CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, classifier.config.num_classes))


def _score(
    classifier: GraphClassifier,
    subs: Sequence[Subgraph],
    mode: str,
    calibration: CalibrationState | None,
    reward_cfg: RewardConfig | None,
) -> tuple[list[np.ndarray | None], list[RewardBreakdown | None]]:
    valid = [i for i, s in enumerate(subs) if not s.is_empty(mode)]
    probs_valid = _predict(classifier, [subs[i] for i in valid])
    probs: list[np.ndarray | None] = [None] * len(subs)
    for i, p in zip(valid, probs_valid):
        probs[i] = p
    rewards: list[RewardBreakdown | None] = [None] * len(subs)
    if calibration is not None and reward_cfg is not None:
        for i, s in enumerate(subs):
            if probs[i] is None:
                rewards[i] = compute_reward(None, s.parent.label, 0.0, None, reward_cfg, valid=False)
            else:
                pset = prediction_set(probs[i], calibration)
                rewards[i] = compute_reward(probs[i], s.parent.label, s.ratio(mode), pset, reward_cfg)
    return probs, rewards


def evaluate(
    classifier: GraphClassifier,
    policy: SparsificationPolicy | None,
    dataset: Sequence[Graph],
    ids: Sequence[int],
    mode: str = "node",
    deterministic: bool = True,
    calibration: CalibrationState | None = None,
    reward_cfg: RewardConfig | None = None,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
    split: str = "test",
) -> EpochMetrics:
    """Accuracy and kept ratios on policy subgraphs; empty subgraphs count as wrong.

    ``policy=None`` keeps every node and edge.
    """
    ids = list(ids)
    if not ids:
        raise MetricsError(f"cannot evaluate an empty {split} split")
    start = time.perf_counter()
    graphs = [dataset[i] for i in ids]
    subs: list[Subgraph] = []
    for chunk in _chunks(graphs, EVAL_CHUNK):
        subs.extend(_subgraphs(policy, chunk, mode, deterministic, rng)[0])
    probs, rewards = _score(classifier, subs, mode, calibration, reward_cfg)
    correct = [p is not None and int(np.argmax(p)) == g.label for p, g in zip(probs, graphs)]
    kwargs = {}
    if calibration is not None:
        sizes, covered = [], []
        for p, g in zip(probs, graphs):
            if p is None:
                sizes.append(0)
                covered.append(False)
            else:
                pset = prediction_set(p, calibration)
                sizes.append(pset.size)
                covered.append(g.label in pset)
        kwargs["mean_set_size"] = float(np.mean(sizes))
        kwargs["coverage"] = float(np.mean(covered))
    if rewards[0] is not None:
        kwargs["mean_reward"] = float(np.mean([r.total for r in rewards]))
    return EpochMetrics(
        epoch=epoch,
        split=split,
        accuracy=float(np.mean(correct)),
        mean_node_ratio=float(np.mean([s.node_ratio for s in subs])),
        mean_edge_ratio=float(np.mean([s.edge_ratio for s in subs])),
        wall_clock_s=time.perf_counter() - start,
        **kwargs,
    )


def _classifier_step(
    classifier: GraphClassifier,
    optimizer: T.Adam,
    subs: Sequence[Subgraph],
    rng: np.random.Generator,
    epoch: int,
    ids: Sequence[int],
) -> tuple[float, int]:
    g = batch(subs)
    logits = classifier.forward(g, training=True, rng=rng)
    loss = cross_entropy(logits, g.labels)
    value = loss.item()
    if not math.isfinite(value):
        dump = {
            "epoch": epoch,
            "graph_ids": [int(i) for i in ids],
            "loss": value,
            "logits_finite": bool(np.all(np.isfinite(logits.data))),
            "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in classifier.params.items()},
        }
        raise DivergenceError(f"non-finite classifier loss at epoch {epoch} on graphs {dump['graph_ids']}", dump)
    correct = int(np.sum(np.argmax(logits.data, axis=1) == g.labels))
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    return value * len(subs), correct


def _log(sink: MetricsSink | None, metrics: Sequence[EpochMetrics], extra: dict[str, float]) -> None:
    if sink is None:
        return
    for m in metrics:
        for name, value in m.rows():
            sink.log(m.epoch, m.split, name, value)
    for name, value in extra.items():
        if math.isfinite(value):
            sink.log(metrics[0].epoch, "train", name, value)
    sink.flush()


@dataclass
class _Best:
    score: float = -math.inf
    epoch: int = 0
    states: tuple = ()
    calibration: CalibrationState | None = None
    selected: dict = field(default_factory=dict)


# --- training loops ---------------------------------------------------------


def train(
    config: TrainConfig,
    split: DatasetSplit,
    dataset: Sequence[Graph],
    sink: MetricsSink | None = None,
) -> TrainResult:
    """Alternate classifier training on D_tr subgraphs with PPO updates on D_val rewards."""
    _check_split(split, dataset)
    started = time.perf_counter()
    in_dim = dataset[split.train[0]].num_features
    data_seq, policy_seq, ppo_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(4)
    rng_data, rng_policy = np.random.default_rng(data_seq), np.random.default_rng(policy_seq)
    rng_ppo, rng_drop = np.random.default_rng(ppo_seq), np.random.default_rng(drop_seq)
    classifier = GraphClassifier(config.gnn, in_dim, seed=config.seed)
    policy = SparsificationPolicy(config.gnn, in_dim, config.mode, seed=config.seed + 1, init_bias=config.policy_init_bias)
    clf_opt = T.Adam(classifier.parameters(), lr=config.classifier_lr)
    pol_opt = make_optimizer(policy, config.ppo)
    mode, rcfg = config.mode, config.reward
    history: list[EpochMetrics] = []
    best = _Best()
    best_reward = -math.inf
    stale_acc = stale_reward = 0
    clf_plateau, rl_plateau = Plateau(config.scheduler_patience), Plateau(config.scheduler_patience)
    frozen = False
    calibration: CalibrationState | None = None
    val_ids = list(split.val) or list(split.train)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        # (a) classifier on stochastic policy subgraphs of D_tr
        order = [int(i) for i in rng_data.permutation(np.array(split.train))]
        loss_sum, n_correct, n_seen = 0.0, 0, 0
        node_r, edge_r, calib_subs = [], [], []
        for ids in _chunks(order, config.batch_size):
            subs, _ = _subgraphs(policy, [dataset[i] for i in ids], mode, False, rng_policy)
            node_r += [s.node_ratio for s in subs]
            edge_r += [s.edge_ratio for s in subs]
            valid = [(i, s) for i, s in zip(ids, subs) if not s.is_empty(mode)]
            if not valid:
                continue
            loss, correct = _classifier_step(classifier, clf_opt, [s for _, s in valid], rng_drop, epoch, [i for i, _ in valid])
            loss_sum += loss
            n_correct += correct
            n_seen += len(valid)
            calib_subs += [s for _, s in valid]
        # (b) conformal threshold from the updated classifier on the same subgraphs
        probs = _predict(classifier, calib_subs)
        scores = [aps_score(p, s.parent.label) for p, s in zip(probs, calib_subs)]
        calibration = calibrate(scores, rcfg.alpha_conf) if scores else CalibrationState((), rcfg.alpha_conf, math.inf)
        # (c, d) rollouts on D_val and a PPO phase
        stats: PpoStats | None = None
        if not frozen:
            buffer = RolloutBuffer(config.ppo.env_steps)
            rollout_ids: list[int] = []
            while len(rollout_ids) < config.ppo.env_steps:
                rollout_ids += [int(i) for i in rng_data.permutation(np.array(val_ids))]
            rollout_ids = rollout_ids[: config.ppo.env_steps]
            for ids in _chunks(rollout_ids, max(config.batch_size, 32)):
                graphs = [dataset[i] for i in ids]
                subs, samples = _subgraphs(policy, graphs, mode, False, rng_policy)
                _, rewards = _score(classifier, subs, mode, calibration, rcfg)
                for gid, s, r in zip(ids, samples, rewards):
                    buffer.add(RolloutRecord(gid, s.mask, s.log_prob, s.value, r.total, r.set_size))
                    if sink is not None:
                        sink.record_reward(epoch, gid, r)
            stats = update(policy, buffer, dataset, config.ppo, rng_ppo, pol_opt)
        # (e) evaluation, schedulers, early stopping
        train_m = EpochMetrics(
            epoch,
            "train",
            accuracy=n_correct / n_seen if n_seen else 0.0,
            mean_node_ratio=float(np.mean(node_r)),
            mean_edge_ratio=float(np.mean(edge_r)),
            losses={"loss_ce": loss_sum / n_seen if n_seen else math.nan, "quantile": calibration.quantile,
                    "invalid_fraction": 1.0 - n_seen / len(order)},
        )
        val_m = evaluate(classifier, policy, dataset, val_ids, mode, True, calibration, rcfg, epoch=epoch, split="val")
        test_m = (
            evaluate(classifier, policy, dataset, split.test, mode, True, calibration, rcfg, epoch=epoch, split="test")
            if split.test
            else None
        )
        improved = val_m.accuracy > best.score
        reward_improved = val_m.mean_reward > best_reward
        if reward_improved:
            best_reward, stale_reward = val_m.mean_reward, 0
        else:
            stale_reward += 1
        clf_opt.lr = step_scheduler(clf_opt.lr, config.classifier_scheduler_factor, clf_plateau.update(val_m.accuracy)[1])
        if not frozen:
            pol_opt.lr = step_scheduler(pol_opt.lr, config.rl_scheduler_factor, rl_plateau.update(val_m.mean_reward)[1])
            if config.ppo_patience and stale_reward >= config.ppo_patience:
                frozen = True
        train_m = replace(train_m, wall_clock_s=time.perf_counter() - t0)
        epoch_metrics = [m for m in (train_m, val_m, test_m) if m is not None]
        history.extend(epoch_metrics)
        extra = {"lr_classifier": clf_opt.lr, "lr_policy": pol_opt.lr, "policy_frozen": float(frozen)}
        if stats is not None:
            extra.update(
                ppo_surrogate=stats.surrogate,
                ppo_value_loss=stats.value_loss,
                ppo_entropy=stats.entropy,
                ppo_clip_fraction=stats.clip_fraction,
                ppo_ratio_deviation=stats.first_ratio_deviation,
            )
        _log(sink, epoch_metrics, extra)
        selected = {m.split: m for m in epoch_metrics}
        if improved:
            best = _Best(val_m.accuracy, epoch, (classifier.state_dict(), policy.state_dict()), calibration, selected)
            stale_acc = 0
        else:
            stale_acc += 1
        if config.report_last_epoch:
            best = _Best(best.score, epoch, (), calibration, selected)
        if config.early_stop_patience and stale_acc >= config.early_stop_patience:
            break

    if best.states:
        classifier.load_state_dict(best.states[0])
        policy.load_state_dict(best.states[1])
    return TrainResult(
        classifier, policy, history, best.epoch, best.calibration or calibration, best.selected,
        time.perf_counter() - started,
    )


def train_vanilla(
    config: TrainConfig,
    split: DatasetSplit,
    dataset: Sequence[Graph],
    sink: MetricsSink | None = None,
) -> TrainResult:
    """Classifier-only training on full graphs, sharing the classifier machinery of ``train``."""
    _check_split(split, dataset)
    started = time.perf_counter()
    in_dim = dataset[split.train[0]].num_features
    data_seq, _, _, drop_seq = np.random.SeedSequence(config.seed).spawn(4)
    rng_data, rng_drop = np.random.default_rng(data_seq), np.random.default_rng(drop_seq)
    classifier = GraphClassifier(config.gnn, in_dim, seed=config.seed)
    opt = T.Adam(classifier.parameters(), lr=config.classifier_lr)
    history: list[EpochMetrics] = []
    best = _Best()
    stale = 0
    plateau = Plateau(config.scheduler_patience)
    val_ids = list(split.val) or list(split.train)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = [int(i) for i in rng_data.permutation(np.array(split.train))]
        loss_sum, n_correct = 0.0, 0
        for ids in _chunks(order, config.batch_size):
            loss, correct = _classifier_step(classifier, opt, [dataset[i] for i in ids], rng_drop, epoch, ids)
            loss_sum += loss
            n_correct += correct
        train_m = EpochMetrics(
            epoch, "train", n_correct / len(order), 1.0, 1.0,
            losses={"loss_ce": loss_sum / len(order)}, wall_clock_s=time.perf_counter() - t0,
        )
        val_m = evaluate(classifier, None, dataset, val_ids, config.mode, epoch=epoch, split="val")
        test_m = evaluate(classifier, None, dataset, split.test, config.mode, epoch=epoch, split="test") if split.test else None
        improved = val_m.accuracy > best.score
        opt.lr = step_scheduler(opt.lr, config.classifier_scheduler_factor, plateau.update(val_m.accuracy)[1])
        epoch_metrics = [m for m in (train_m, val_m, test_m) if m is not None]
        history.extend(epoch_metrics)
        _log(sink, epoch_metrics, {"lr_classifier": opt.lr})
        selected = {m.split: m for m in epoch_metrics}
        if improved:
            best = _Best(val_m.accuracy, epoch, (classifier.state_dict(),), None, selected)
            stale = 0
        else:
            stale += 1
        if config.report_last_epoch:
            best = _Best(best.score, epoch, (), None, selected)
        if config.early_stop_patience and stale >= config.early_stop_patience:
            break
    if best.states:
        classifier.load_state_dict(best.states[0])
    return TrainResult(classifier, None, history, best.epoch, None, best.selected, time.perf_counter() - started)

