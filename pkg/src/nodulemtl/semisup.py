"""Supervised training loop and the self-training (pseudo-labeling) loop built on it.

The self-training loop trains on the labeled pool, predicts masks for a
slice of the still-unlabeled records, merges the accepted predictions into
the pool as pseudo-labels, and retrains.  Records without a mask still
contribute to the classification loss while they wait to be pseudo-labeled.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import MANUAL, NODULE, NON_NODULE, PSEUDO, UNLABELED, CandidateRecord, read_volume, write_volume
from .errors import ConfigError, DataError, NumericError, UsageError
from .losses import MultiTaskLossConfig, cross_entropy_class, cross_entropy_voxel, multi_task_loss
from .metrics import LogRow, MetricsLog, evaluate_fold
from .model import NODULE_CLASS, MultiTaskNet, forward, predict_batch
from .optim import Adam
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    seg_threshold: float = 0.5
    nonnodule_seg_loss: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.seg_threshold < 1.0:
            raise ConfigError("seg_threshold must lie in (0, 1)")


@dataclass
class SemiSupConfig:
    chunk_fraction: float = 0.25
    rounds: int = 4
    epochs_initial: int = 30
    epochs_per_round: int = 10
    confidence_floor: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.chunk_fraction <= 1.0:
            raise ConfigError("chunk_fraction must lie in (0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if not 0.0 <= self.confidence_floor < 1.0:
            raise ConfigError("confidence_floor must lie in [0, 1)")
        if self.epochs_initial < 0 or self.epochs_per_round < 0:
            raise ConfigError("epoch counts must be non-negative")


class LabeledPool:
    """Training records flagged manual or pseudo; manual records are write-once."""

    def __init__(self, records: Sequence[CandidateRecord] = ()):
        self._records: dict[str, CandidateRecord] = {}
        for r in records:
            if r.provenance == PSEUDO:
                raise DataError(f"{r.id}: seed records of a pool must not be pseudo-labeled")
            self._records[r.id] = replace(r, provenance=MANUAL)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._records

    @property
    def records(self) -> list[CandidateRecord]:
        return list(self._records.values())

    def get(self, record_id: str) -> CandidateRecord:
        return self._records[record_id]

    def add_pseudo(self, records: Sequence[CandidateRecord]) -> None:
        for r in records:
            if r.provenance != PSEUDO or r.round is None:
                raise DataError(f"{r.id}: only pseudo records with a round of origin can be added")
            existing = self._records.get(r.id)
            if existing is not None:
                kind = "manual" if existing.provenance == MANUAL else "pseudo"
                raise DataError(f"{r.id}: already in pool as a {kind} record")
            self._records[r.id] = r

    def counts(self) -> dict[str, int]:
        out = {MANUAL: 0, PSEUDO: 0}
        for r in self._records.values():
            out[r.provenance] += 1
        return out


# ---------------------------------------------------------------------------
# supervised training


def _batch(records: Sequence[CandidateRecord], dtype, nonnodule_seg_loss: bool):
    x = np.stack([r.patch for r in records])[:, None].astype(dtype)
    labels = np.array([r.label_index for r in records])
    shape = records[0].patch.shape
    masks = np.zeros((len(records), 1) + shape, dtype=dtype)
    has = np.zeros(len(records), dtype=bool)
    for i, r in enumerate(records):
        if r.mask is None or (r.class_label == NON_NODULE and not nonnodule_seg_loss):
            continue
        masks[i, 0] = r.mask
        has[i] = True
    return x, labels, masks, has


def _contributes(r: CandidateRecord, loss_cfg: MultiTaskLossConfig, nonnodule_seg_loss: bool) -> bool:
    if r.class_label == UNLABELED:
        return False
    if loss_cfg.w_cls:
        return True
    return r.mask is not None and (nonnodule_seg_loss or r.class_label != NON_NODULE)


def epoch_order(n: int, seed: int, round_: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; depends only on (seed, round, epoch)."""
    return np.random.default_rng([seed, round_, epoch]).permutation(n)


def validate(net: MultiTaskNet, val: Sequence[CandidateRecord], seg_threshold: float) -> tuple[float, float]:
    if not val:
        return float("nan"), float("nan")
    m = evaluate_fold(net, val, seg_threshold)
    return m.dsc, m.sensitivity


EpochHook = Callable[[int, int, MultiTaskNet, Adam, MetricsLog], None]


def train_supervised(
    net: MultiTaskNet,
    pool,
    val: Sequence[CandidateRecord],
    epochs: int,
    loss_cfg: MultiTaskLossConfig,
    optimizer: Adam | None = None,
    cfg: TrainConfig | None = None,
    round_: int = 0,
    start_epoch: int = 1,
    on_epoch: EpochHook | None = None,
) -> tuple[MultiTaskNet, MetricsLog]:
    """Train ``net`` for ``epochs`` epochs over ``pool`` and log validation metrics each epoch.

    ``pool`` is a :class:`LabeledPool` or any sequence of records.  Records
    that feed no active loss are skipped.  ``start_epoch`` resumes a run:
    epochs before it are not replayed, and since batch order depends only
    on (seed, round, epoch) the continuation matches an uninterrupted run.
    """
    cfg = cfg or TrainConfig()
    history = MetricsLog()
    if epochs <= 0:
        return net, history
    records = pool.records if isinstance(pool, LabeledPool) else list(pool)
    records = [r for r in records if _contributes(r, loss_cfg, cfg.nonnodule_seg_loss)]
    if not records:
        raise DataError("no training records contribute to the configured losses")
    optimizer = optimizer or Adam(net.parameters(), lr=cfg.lr)
    params = net.parameters()
    idle = [p for head, w in (("cls", loss_cfg.w_cls), ("seg", loss_cfg.w_seg)) if not w
            for p in net.head_parameters(head)]
    dtype = np.dtype(net.cfg.dtype)
    for epoch in range(start_epoch, epochs + 1):
        net.train()
        order = epoch_order(len(records), cfg.seed, round_, epoch)
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[lo : lo + cfg.batch_size]]
            x, labels, masks, has = _batch(batch, dtype, cfg.nonnodule_seg_loss)
            class_probs, seg_probs = forward(net, Tensor(x))
            l_cls = cross_entropy_class(class_probs, labels, loss_cfg.clamp_eps)
            l_seg = cross_entropy_voxel(seg_probs, masks, has, loss_cfg.clamp_eps)
            total = multi_task_loss(l_cls, l_seg, params, loss_cfg)
            if not np.isfinite(total.data).all():
                raise NumericError(f"non-finite loss at round {round_}, epoch {epoch}")
            optimizer.zero_grad()
            backward(total)
            for p in idle:
                if p.grad is not None and np.any(p.grad):
                    raise UsageError("a head with task weight 0 received a gradient")
            optimizer.step(allow_missing=True)
            sums += len(batch) * np.array([total.item(), l_cls.item(), l_seg.item()])
        dsc, sens = validate(net, val, cfg.seg_threshold)
        row = LogRow(epoch, round_, *(sums / len(records)).tolist(), dsc, sens)
        history.append(row)
        log.info("round %d epoch %d loss %.4f (cls %.4f seg %.4f) dsc %.4f sens %.4f",
                 round_, epoch, row.loss_total, row.loss_cls, row.loss_seg, dsc, sens)
        if on_epoch is not None:
            on_epoch(round_, epoch, net, optimizer, history)
    return net, history


# ---------------------------------------------------------------------------
# pseudo-labeling


def pseudo_label(
    net: MultiTaskNet,
    unlabeled: Sequence[CandidateRecord],
    seg_threshold: float = 0.5,
    confidence_floor: float = 0.0,
    round_: int = 1,
    batch_size: int = 16,
) -> tuple[list[CandidateRecord], list[CandidateRecord]]:
    """Predict masks (and missing class labels) for ``unlabeled``.

    A record is rejected when ``max(p, 1 - p) < confidence_floor`` for its
    nodule probability ``p``.  A known class label is kept; an unknown one
    becomes the predicted class.  Non-nodule records get an all-zero mask.
    """
    if not unlabeled:
        return [], []
    probs, segs = predict_batch(net, np.stack([r.patch for r in unlabeled]), batch_size)
    accepted, rejected = [], []
    for r, p, s in zip(unlabeled, probs[:, NODULE_CLASS], segs[:, 0]):
        if max(p, 1.0 - p) < confidence_floor:
            rejected.append(r)
            continue
        label = r.class_label if r.class_label != UNLABELED else (NODULE if p >= 0.5 else NON_NODULE)
        mask = (s >= seg_threshold).astype(np.uint8)
        if label == NON_NODULE:
            mask[...] = 0
        accepted.append(replace(r, class_label=label, mask=mask, provenance=PSEUDO, round=round_))
    return accepted, rejected


@dataclass(frozen=True)
class Progress:
    """Last completed (round, epoch); epoch 0 means the round's pseudo-labels are in but no epoch ran."""

    round: int
    epoch: int


@dataclass
class RoundStats:
    round: int
    offered: int
    accepted: int
    rejected: int
    remaining: int
    pool_size: int


@dataclass
class SemiSupResult:
    net: MultiTaskNet
    log: MetricsLog
    pool: LabeledPool
    remaining: list[CandidateRecord]
    rounds: list[RoundStats] = field(default_factory=list)


def semi_supervised_train(
    net: MultiTaskNet,
    labeled: LabeledPool,
    unlabeled: Sequence[CandidateRecord],
    val: Sequence[CandidateRecord],
    cfg: SemiSupConfig,
    loss_cfg: MultiTaskLossConfig,
    train_cfg: TrainConfig | None = None,
    optimizer: Adam | None = None,
    on_epoch: EpochHook | None = None,
    on_round: Callable[[int, LabeledPool, list[CandidateRecord]], None] | None = None,
    resume: Progress | None = None,
) -> SemiSupResult:
    """Initial supervised training, then ``cfg.rounds`` pseudo-label/retrain rounds.

    With ``resume``, ``labeled`` and ``unlabeled`` must be the pool and the
    remaining records as they stood at that point, and ``net``/``optimizer``
    the matching restored state; training picks up after the recorded epoch.
    """
    if len(labeled) == 0:
        raise DataError("self-training needs a non-empty labeled pool")
    train_cfg = train_cfg or TrainConfig()
    optimizer = optimizer or Adam(net.parameters(), lr=train_cfg.lr)
    remaining = list(unlabeled)
    pool_ids = {r.id for r in labeled.records}
    if any(r.id in pool_ids for r in remaining):
        raise DataError("unlabeled records overlap the labeled pool")
    start = resume or Progress(0, 0)
    if not 0 <= start.round <= cfg.rounds:
        raise UsageError(f"cannot resume at round {start.round} of {cfg.rounds}")

    def train(round_: int, epochs: int) -> MetricsLog:
        first = start.epoch + 1 if round_ == start.round else 1
        _, hist = train_supervised(net, labeled.records + remaining, val, epochs, loss_cfg,
                                   optimizer, train_cfg, round_, start_epoch=first, on_epoch=on_epoch)
        return hist

    history = train(start.round, cfg.epochs_initial if start.round == 0 else cfg.epochs_per_round)
    result = SemiSupResult(net, history, labeled, remaining)
    for round_ in range(start.round + 1, cfg.rounds + 1):
        if not remaining:
            break
        n = min(len(remaining), max(1, math.ceil(cfg.chunk_fraction * len(remaining))))
        pick = set(np.random.default_rng([cfg.seed, round_]).permutation(len(remaining))[:n].tolist())
        chunk = [r for i, r in enumerate(remaining) if i in pick]
        rest = [r for i, r in enumerate(remaining) if i not in pick]
        accepted, rejected = pseudo_label(net, chunk, train_cfg.seg_threshold, cfg.confidence_floor, round_)
        labeled.add_pseudo(accepted)
        remaining = rest + rejected
        result.rounds.append(RoundStats(round_, n, len(accepted), len(rejected), len(remaining), len(labeled)))
        if on_round is not None:
            on_round(round_, labeled, remaining)
        history.extend(train(round_, cfg.epochs_per_round))
    result.remaining = remaining
    return result


# ---------------------------------------------------------------------------
# pool checkpoints

POOL_FIELDS = ["id", "provenance", "round", "class", "mask_path"]


def write_pool_checkpoint(pool: LabeledPool, out_dir, round_: int) -> Path:
    """``pool_round{r}.csv`` plus the masks it references; returns the manifest path."""
    out = Path(out_dir)
    mask_dir = out / f"pool_round{round_}_masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    manifest = out / f"pool_round{round_}.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POOL_FIELDS)
        for r in pool.records:
            mask_path = ""
            if r.mask is not None:
                mask_path = f"{mask_dir.name}/{r.id}.ndlv"
                write_volume(out / mask_path, r.mask.astype(np.uint8))
            w.writerow([r.id, r.provenance, "" if r.round is None else r.round, r.class_label, mask_path])
    return manifest


def read_pool_checkpoint(manifest, records_by_id: dict[str, CandidateRecord]) -> LabeledPool:
    """Rebuild a pool from a checkpoint manifest; patches come from ``records_by_id``."""
    manifest = Path(manifest)
    pool = LabeledPool()
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != POOL_FIELDS:
            raise DataError(f"{manifest}: header must be {','.join(POOL_FIELDS)}")
        for row in reader:
            if row["id"] not in records_by_id:
                raise DataError(f"{manifest}: unknown record {row['id']}")
            base = records_by_id[row["id"]]
            mask = read_volume(manifest.parent / row["mask_path"]) if row["mask_path"] else None
            rec = replace(base, provenance=row["provenance"], class_label=row["class"], mask=mask,
                          round=int(row["round"]) if row["round"] else None)
            if rec.provenance == PSEUDO:
                pool.add_pseudo([rec])
            else:
                pool._records[rec.id] = rec
    return pool


def assert_manual_unchanged(before: LabeledPool, after: LabeledPool) -> None:
    """Raise :class:`UsageError` if any manual record differs between two pools."""
    for r in before.records:
        if r.provenance != MANUAL:
            continue
        other = after.get(r.id) if r.id in after else None
        if other is None or other.provenance != MANUAL or other.class_label != r.class_label:
            raise UsageError(f"manual record {r.id} was modified")
        if (r.mask is None) != (other.mask is None) or (r.mask is not None and not np.array_equal(r.mask, other.mask)):
            raise UsageError(f"manual mask of {r.id} was modified")
