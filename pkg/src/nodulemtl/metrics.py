"""Dice, sensitivity, candidate-level FROC, and the learning-curve log."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import NODULE
from .errors import DataError, FormatError, ShapeError, UndefinedMetricError
from .model import MultiTaskNet, predict_batch

FROC_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def dice(pred_mask, true_mask) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def sensitivity(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("sensitivity is undefined without positive labels")
    return int((scores[labels] >= threshold).sum()) / positives


@dataclass
class FrocCurve:
    """Operating points ordered by decreasing threshold."""

    thresholds: np.ndarray
    fp_per_scan: np.ndarray
    sensitivities: np.ndarray
    n_scans: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_scan.tolist(), self.sensitivities.tolist()))

    def sensitivity_at(self, rate: float) -> float:
        """Largest sensitivity achieved with at most ``rate`` false positives per scan."""
        ok = self.fp_per_scan <= rate
        return float(self.sensitivities[ok].max()) if ok.any() else 0.0

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fp_per_scan", "sensitivity"])
            for t, f, s in zip(self.thresholds, self.fp_per_scan, self.sensitivities):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(s))])

    @classmethod
    def from_csv(cls, path, n_scans: int = 0) -> "FrocCurve":
        rows = _read_rows(path, ["threshold", "fp_per_scan", "sensitivity"])
        arr = np.array([[float(r[k]) for k in ("threshold", "fp_per_scan", "sensitivity")] for r in rows])
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], n_scans)


def froc(scores, labels, scan_ids) -> FrocCurve:
    """Sweep the threshold over every distinct score (candidate-level matching)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    scan_ids = np.asarray(scan_ids)
    if scores.size == 0:
        raise DataError("froc needs at least one candidate")
    if not (scores.shape == labels.shape == scan_ids.shape):
        raise ShapeError("scores, labels and scan_ids must have equal length")
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("froc is undefined without positive candidates")
    n_scans = len(np.unique(scan_ids))
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    # keep the last index of each run of equal scores: threshold t admits all scores >= t
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return FrocCurve(s_sorted[last], fp[last] / n_scans, tp[last] / positives, n_scans)


def froc_score(curve_or_sensitivities, rates: Sequence[float] = FROC_RATES) -> float:
    """Mean sensitivity over the FP/scan ``rates``.

    Accepts a :class:`FrocCurve` or the sensitivities already read at ``rates``.
    """
    if isinstance(curve_or_sensitivities, FrocCurve):
        if len(curve_or_sensitivities.thresholds) == 0:
            raise DataError("empty FROC curve")
        values = [curve_or_sensitivities.sensitivity_at(r) for r in rates]
    else:
        values = [float(v) for v in curve_or_sensitivities]
        if len(values) != len(rates):
            raise ShapeError(f"expected {len(rates)} sensitivities, got {len(values)}")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# learning-curve log

LOG_FIELDS = ["epoch", "round", "loss_total", "loss_cls", "loss_seg", "val_dsc", "val_sens"]


@dataclass
class LogRow:
    epoch: int
    round: int
    loss_total: float
    loss_cls: float
    loss_seg: float
    val_dsc: float
    val_sens: float


@dataclass
class MetricsLog:
    rows: list[LogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: LogRow) -> None:
        prev = [r for r in self.rows if r.round == row.round]
        if prev and row.epoch <= prev[-1].epoch:
            raise DataError(f"epoch {row.epoch} does not follow {prev[-1].epoch} in round {row.round}")
        self.rows.append(row)

    def extend(self, other: "MetricsLog") -> None:
        for r in other.rows:
            self.append(r)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r.epoch, r.round] + [repr(float(getattr(r, k))) for k in LOG_FIELDS[2:]])

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        log = cls()
        for row in _read_rows(path, LOG_FIELDS):
            log.append(LogRow(int(row["epoch"]), int(row["round"]), *(float(row[k]) for k in LOG_FIELDS[2:])))
        return log

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def _read_rows(path, expected: list[str]) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty CSV")
        if list(reader.fieldnames) != expected:
            raise FormatError(f"{path}: header must be {','.join(expected)}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: CSV has no data rows")
    return rows


# ---------------------------------------------------------------------------
# fold evaluation


@dataclass
class FoldMetrics:
    dsc: float
    sensitivity: float
    curve: FrocCurve
    froc_score: float
    n_nodules: int

    def as_row(self, epoch: int = 0, round: int = 0, losses=(float("nan"),) * 3) -> LogRow:
        return LogRow(epoch, round, *losses, self.dsc, self.sensitivity)


Predictor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def evaluate_predictions(class_probs, seg_probs, records, seg_threshold: float = 0.5,
                         cls_threshold: float = 0.5) -> FoldMetrics:
    """Metrics from precomputed predictions aligned with ``records``."""
    if len(records) == 0:
        raise DataError("cannot evaluate an empty fold")
    class_probs = np.asarray(class_probs)
    seg_probs = np.asarray(seg_probs)
    labels = np.array([r.class_label == NODULE for r in records])
    scores = class_probs[:, 1]
    dscs = [
        dice(seg_probs[i].reshape(r.mask.shape) >= seg_threshold, r.mask)
        for i, r in enumerate(records)
        if r.class_label == NODULE and r.mask is not None
    ]
    sens = sensitivity(scores, labels, cls_threshold)
    curve = froc(scores, labels, [r.scan_id for r in records])
    return FoldMetrics(float(np.mean(dscs)) if dscs else float("nan"), sens, curve, froc_score(curve), len(dscs))


def evaluate_fold(model, records, seg_threshold: float = 0.5, batch_size: int = 16) -> FoldMetrics:
    """Evaluate a network (inference mode) or any predictor callable on one fold.

    A callable receives the stacked [n, z, y, x] patches and returns
    ``(class_probs [n, 2], seg_probs [n, ...])``.
    """
    records = list(records)
    if not records:
        raise DataError("cannot evaluate an empty fold")
    patches = np.stack([r.patch for r in records])
    if isinstance(model, MultiTaskNet):
        class_probs, seg_probs = predict_batch(model, patches, batch_size)
    else:
        class_probs, seg_probs = model(patches)
    return evaluate_predictions(class_probs, seg_probs, records, seg_threshold)


__all__ = [
    "FROC_RATES", "FrocCurve", "FoldMetrics", "LogRow", "MetricsLog", "dice", "evaluate_fold",
    "evaluate_predictions", "froc", "froc_score", "sensitivity",
]
