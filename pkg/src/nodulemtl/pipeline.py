"""The four training strategies compared in the experiments, on one train/validation split."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from .data import CandidateRecord, Dataset, FoldSplit, withhold_masks
from .errors import ConfigError
from .losses import MultiTaskLossConfig
from .metrics import FoldMetrics, MetricsLog, evaluate_fold
from .model import MultiTaskNet, NetworkConfig, build_network
from .optim import Adam
from .semisup import (
    EpochHook,
    LabeledPool,
    Progress,
    RoundStats,
    SemiSupConfig,
    TrainConfig,
    semi_supervised_train,
    train_supervised,
)

SINGLE_SEG = "single-task-seg"
SINGLE_CLS = "single-task-cls"
MULTI_MANUAL = "multi-task-manual"
MULTI_SEMISUP = "multi-task-semisup"
STRATEGIES = (SINGLE_SEG, SINGLE_CLS, MULTI_MANUAL, MULTI_SEMISUP)


def strategy_loss(strategy: str, base: MultiTaskLossConfig) -> MultiTaskLossConfig:
    """Single-task strategies switch the other task off by giving it weight 0."""
    if strategy == SINGLE_SEG:
        return replace(base, w_cls=0.0, w_seg=base.w_seg or 1.0)
    if strategy == SINGLE_CLS:
        return replace(base, w_seg=0.0, w_cls=base.w_cls or 1.0)
    if strategy in (MULTI_MANUAL, MULTI_SEMISUP):
        return base
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


def fold_records(dataset: Dataset, split: FoldSplit, val_fold: int,
                 labeled_fraction: float = 1.0, seed: int = 0) -> tuple[list[CandidateRecord], list[CandidateRecord]]:
    """Training and validation records.

    Masks are withheld only on the training side, and validation keeps only
    original candidates (shifted copies would be counted twice per scan).
    """
    if not 0 <= val_fold < split.k:
        raise ConfigError(f"val_fold must lie in [0, {split.k})")
    train, val = split.train_val(dataset, val_fold)
    if labeled_fraction < 1.0:
        train = withhold_masks(train, labeled_fraction, seed)
    return train.records, [r for r in val.records if r.parent_id == r.id]


@dataclass
class StrategyResult:
    strategy: str
    net: MultiTaskNet
    log: MetricsLog
    metrics: FoldMetrics | None
    pool: LabeledPool | None = None
    rounds: list[RoundStats] = field(default_factory=list)


def run_strategy(
    strategy: str,
    train: Sequence[CandidateRecord],
    val: Sequence[CandidateRecord],
    net_cfg: NetworkConfig,
    loss_cfg: MultiTaskLossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    semisup_cfg: SemiSupConfig | None = None,
    net: MultiTaskNet | None = None,
    optimizer: Adam | None = None,
    on_epoch: EpochHook | None = None,
    on_round=None,
    resume: Progress | None = None,
    pool: LabeledPool | None = None,
    remaining: Sequence[CandidateRecord] | None = None,
) -> StrategyResult:
    """Train from scratch (unless ``net`` is given) with one strategy and evaluate on ``val``.

    The self-training strategy starts from the records that carry a mask;
    mask-less training records are its unlabeled set.  To resume it, pass the
    checkpointed ``pool`` and ``remaining`` records along with ``resume``.
    """
    loss = strategy_loss(strategy, loss_cfg or MultiTaskLossConfig())
    train_cfg = train_cfg or TrainConfig()
    net = net or build_network(net_cfg)
    optimizer = optimizer or Adam(net.parameters(), lr=train_cfg.lr)
    rounds = []
    if strategy == MULTI_SEMISUP:
        ss = semisup_cfg or SemiSupConfig(epochs_initial=train_cfg.epochs)
        if pool is None:
            pool = LabeledPool([r for r in train if r.mask is not None])
            remaining = [r for r in train if r.mask is None]
        res = semi_supervised_train(net, pool, list(remaining or ()), val, ss, loss, train_cfg, optimizer,
                                    on_epoch=on_epoch, on_round=on_round, resume=resume)
        history, pool, rounds = res.log, res.pool, res.rounds
    else:
        first = resume.epoch + 1 if resume else 1
        _, history = train_supervised(net, train, val, train_cfg.epochs, loss, optimizer, train_cfg,
                                      start_epoch=first, on_epoch=on_epoch)
    metrics = evaluate_fold(net, val, train_cfg.seg_threshold) if val else None
    return StrategyResult(strategy, net, history, metrics, pool, rounds)
