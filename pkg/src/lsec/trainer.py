"""Epoch loop: batch scheduling over both tasks, Adam, early stopping.

Buy positives are sharded into batches of `batch_size`; follow positives are
interleaved proportionally so that every batch optimizes the combined loss.
RNG streams derive from (seed, epoch, batch), making runs bit-reproducible.
Early stopping watches validation Recall@10 and restores the best parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .datagen import SplitResult
from .errors import ConfigError, ContractError
from .evaluate import DEFAULT_KS, RankingMetrics, evaluate_split
from .model import ModelConfig, ModelParams, batch_forward_backward, init_model
from .sampler import FanoutPlan, KnownPositiveSet, make_full_blocks, make_minibatch

logger = logging.getLogger("lsec.trainer")

# (relations, tasks) rows of the standard ablation sweep
ABLATION_GRID = (
    ((0,), (0,)),
    ((0, 1), (0,)),
    ((0, 2), (0,)),
    ((0, 1, 2), (0,)),
    ((0, 1, 2), (0, 1)),
)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-4
    batch_size: int = 4096
    max_epochs: int = 30
    patience: int = 3
    eval_every: int = 1
    seed: int = 0
    fanout_quantile: float = 0.9

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not 0.0 < self.fanout_quantile <= 1.0:
            raise ConfigError("fanout_quantile must be in (0, 1]")
        self.model.validate()
        return self


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_metrics: RankingMetrics | None
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "losses": self.losses,
            "val_metrics": self.val_metrics.to_dict() if self.val_metrics else None,
            "wall_time": self.wall_time,
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_recall10: float = -1.0

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "best_epoch": self.best_epoch,
            "best_recall10": self.best_recall10,
        }


TASK_NAMES = {0: "buy", 1: "follow"}


class Trainer:
    """Owns one (split, config) training run."""

    def __init__(self, split: SplitResult, config: TrainConfig):
        config.validate()
        self.split = split
        self.config = config
        self.graph = split.train
        mcfg = config.model
        if self.graph.buy.n_edges == 0:
            raise ContractError("empty training split")
        if 1 in mcfg.tasks and self.graph.follow.n_edges == 0:
            raise ContractError("follow task active but no follow edges in training graph")

        self.buy_positives = self.graph.buy.forward_edges()
        self.follow_positives = self.graph.follow.forward_edges()
        self.fanout = FanoutPlan.from_quantile(self.graph, config.fanout_quantile,
                                               relations=sorted(mcfg.relations))
        self.known_positives = {
            0: KnownPositiveSet.from_bipartite(self.graph.buy),
            1: KnownPositiveSet.from_bipartite(self.graph.follow),
        }
        self.full_blocks = {
            rel: make_full_blocks(self.graph.relation(rel), mcfg.n_layers)
            for rel in sorted(mcfg.relations)
        }
        self.val_by_user: dict[int, np.ndarray] = {}
        for u, i in split.val_edges:
            self.val_by_user.setdefault(int(u), []).append(int(i))
        self.val_by_user = {u: np.unique(v) for u, v in self.val_by_user.items()}

    # -- masks -------------------------------------------------------------

    def _val_mask(self) -> dict[int, np.ndarray]:
        return {u: self.graph.buy.forward.row(u) for u in self.val_by_user}

    def _test_mask(self) -> dict[int, np.ndarray]:
        users = {int(u) for u, _ in self.split.test_edges}
        out = {}
        for u in users:
            seen = [self.graph.buy.forward.row(u)]
            if u in self.val_by_user:
                seen.append(self.val_by_user[u])
            out[u] = np.unique(np.concatenate(seen)) if seen else np.empty(0, np.int64)
        return out

    # -- epoch loop ----------------------------------------------------------

    def _batches(self, epoch: int):
        """Yield (batch_index, {task: positives}) with proportional follow share."""
        cfg = self.config
        mcfg = cfg.model
        rng = np.random.default_rng([cfg.seed, epoch, 0xBA7C])
        buy = self.buy_positives[rng.permutation(self.buy_positives.shape[0])]
        n_buy = buy.shape[0]
        use_follow = 1 in mcfg.tasks
        if use_follow:
            follow = self.follow_positives[rng.permutation(self.follow_positives.shape[0])]
            n_follow = follow.shape[0]
        n_batches = (n_buy + cfg.batch_size - 1) // cfg.batch_size
        for b in range(n_batches):
            s, e = b * cfg.batch_size, min((b + 1) * cfg.batch_size, n_buy)
            positives = {0: buy[s:e]} if 0 in mcfg.tasks else {}
            if use_follow:
                fs = int(np.floor(n_follow * s / n_buy))
                fe = int(np.floor(n_follow * e / n_buy))
                if fe == fs:  # guarantee at least one follow edge per batch
                    fs, fe = fs % n_follow, fs % n_follow + 1
                positives[1] = follow[fs:fe]
            yield b, positives

    def train_epoch(self, params: ModelParams, epoch: int) -> dict[str, float]:
        """One pass over the shuffled training edges; returns per-task mean loss."""
        cfg = self.config
        mcfg = cfg.model
        sums = {t: 0.0 for t in mcfg.tasks}
        counts = {t: 0 for t in mcfg.tasks}
        for b, positives in self._batches(epoch):
            rng = np.random.default_rng([cfg.seed, epoch, b, 0x5EED])
            batch = make_minibatch(
                self.graph, positives, self.known_positives, mcfg.negative_ratio,
                self.fanout, mcfg.n_layers, rng, relations=sorted(mcfg.relations),
            )
            _, per_task = batch_forward_backward(params, batch)
            nk.adam_step(params.all_params(), cfg.lr)
            for t, loss in per_task.items():
                n = batch.task_edges[t][2].size
                sums[t] += loss * n
                counts[t] += n
        return {TASK_NAMES[t]: sums[t] / counts[t] for t in sums}

    def validate_metrics(self, params: ModelParams, ks=DEFAULT_KS) -> RankingMetrics:
        if self.split.val_edges.shape[0] == 0:
            raise ConfigError("validation split is empty")
        return evaluate_split(params, self.graph, self.split.val_edges,
                              self._val_mask(), ks, full_blocks=self.full_blocks)

    def test_metrics(self, params: ModelParams, ks=DEFAULT_KS) -> RankingMetrics:
        return evaluate_split(params, self.graph, self.split.test_edges,
                              self._test_mask(), ks, full_blocks=self.full_blocks)

    def fit(self) -> tuple[ModelParams, TrainHistory]:
        """Train until max_epochs or patience exhausted; restore best params.

        The watched quantity is validation Recall@10; the returned parameters
        are those of the best evaluation.
        """
        cfg = self.config
        params = init_model(cfg.model, self.graph, cfg.seed)
        history = TrainHistory()
        best_values = params.copy_values()
        since_improve = 0
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            losses = self.train_epoch(params, epoch)
            val = None
            if (epoch + 1) % cfg.eval_every == 0:
                val = self.validate_metrics(params)
                recall10 = val.recall[10]
                if recall10 > history.best_recall10:
                    history.best_recall10 = recall10
                    history.best_epoch = epoch
                    best_values = params.copy_values()
                    since_improve = 0
                else:
                    since_improve += 1
            wall = time.perf_counter() - t0
            history.records.append(EpochRecord(epoch, losses, val, wall))
            logger.info(
                "epoch=%d %s recall10=%s", epoch,
                " ".join(f"loss_{k}={v:.4f}" for k, v in losses.items()),
                f"{val.recall[10]:.4f}" if val else "n/a",
            )
            if since_improve >= cfg.patience:
                break
        params.load_values(best_values)
        return params, history
