import math

import numpy as np
import pytest

from nodulemtl.data import NODULE, NON_NODULE, CandidateRecord
from nodulemtl.errors import DataError, FormatError, ShapeError, UndefinedMetricError
from nodulemtl.metrics import (
    FROC_RATES,
    FrocCurve,
    LogRow,
    MetricsLog,
    dice,
    evaluate_fold,
    froc,
    froc_score,
    sensitivity,
)

REFERENCE_CURVE = [0.773, 0.870, 0.924, 0.941, 0.962, 0.980, 0.986]


def brute_dice(a, b):
    inter = sa = sb = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x) and bool(y)
        sa += bool(x)
        sb += bool(y)
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def brute_froc(scores, labels, scans):
    n_scans, pos = len(set(scans)), sum(labels)
    out = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        out.append((t, fp / n_scans, tp / pos))
    return out


def test_dice_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 7, 3))
        a = rng.uniform(size=shape) < rng.uniform()
        b = rng.uniform(size=shape) < rng.uniform()
        assert dice(a, b) == pytest.approx(brute_dice(a, b), abs=1e-12)


def test_dice_edge_cases():
    z = np.zeros((2, 2, 2))
    assert dice(z, z) == 1.0
    assert dice(z + 1, z) == 0.0
    assert dice(z + 1, z + 1) == 1.0
    with pytest.raises(ShapeError):
        dice(z, np.zeros((2, 2)))


def test_sensitivity_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        scores = rng.integers(0, 5, n) / 4  # coarse values so the >= boundary is hit often
        labels = rng.uniform(size=n) < 0.5
        if not labels.any():
            labels[0] = True
        expected = sum(s >= 0.5 for s, l in zip(scores, labels) if l) / labels.sum()
        assert sensitivity(scores, labels) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        sensitivity([0.9], [0])


def test_froc_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        scores = rng.integers(0, 20, n) / 19
        labels = rng.uniform(size=n) < 0.4
        if not labels.any():
            labels[rng.integers(n)] = True
        scans = rng.integers(0, 6, n).astype(str)
        curve = froc(scores, labels, scans)
        ref = brute_froc(scores.tolist(), labels.tolist(), scans.tolist())
        np.testing.assert_allclose(curve.thresholds, [r[0] for r in ref])
        np.testing.assert_allclose(curve.fp_per_scan, [r[1] for r in ref])
        np.testing.assert_allclose(curve.sensitivities, [r[2] for r in ref])
        # monotone read-off: never decreasing in the rate
        read = [curve.sensitivity_at(r) for r in FROC_RATES]
        assert read == sorted(read)


def test_froc_read_off_convention():
    # 2 scans; the points are (0, .5), (.5, .5), (.5, 1.0), (1.0, 1.0)
    curve = froc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0], ["a", "a", "b", "b"])
    assert curve.points == [(0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
    assert curve.sensitivity_at(0.125) == 0.5
    assert curve.sensitivity_at(0.5) == 1.0
    assert froc_score(curve) == pytest.approx((0.5 + 0.5 + 1 + 1 + 1 + 1 + 1) / 7)
    # no operating point within the rate reads as zero sensitivity
    assert froc([0.9, 0.8], [0, 1], ["a", "a"]).sensitivity_at(0.5) == 0.0


def test_froc_score_of_reference_curve():
    assert round(froc_score(REFERENCE_CURVE), 3) == 0.919
    assert froc_score(REFERENCE_CURVE) == pytest.approx(sum(REFERENCE_CURVE) / 7)
    with pytest.raises(ShapeError):
        froc_score(REFERENCE_CURVE[:6])


def test_froc_errors():
    with pytest.raises(DataError):
        froc([], [], [])
    with pytest.raises(UndefinedMetricError):
        froc([0.3], [0], ["a"])
    with pytest.raises(ShapeError):
        froc([0.3, 0.2], [1], ["a"])


class TestCsv:
    def test_froc_round_trip(self, tmp_path):
        curve = froc([0.9, 0.8, 0.7, 1 / 3], [1, 0, 1, 0], ["a", "a", "b", "b"])
        curve.to_csv(tmp_path / "f.csv")
        back = FrocCurve.from_csv(tmp_path / "f.csv")
        for name in ("thresholds", "fp_per_scan", "sensitivities"):
            np.testing.assert_array_equal(getattr(back, name), getattr(curve, name))

    def test_log_round_trip(self, tmp_path):
        log = MetricsLog()
        log.append(LogRow(1, 0, 1.5, 0.7, 0.8, 0.1, 0.9))
        log.append(LogRow(2, 0, 1.25, 0.5, 0.75, 1 / 3, 0.95))
        log.append(LogRow(1, 1, 0.5, 0.25, 0.25, 0.6, float("nan")))
        log.to_csv(tmp_path / "log.csv")
        back = MetricsLog.from_csv(tmp_path / "log.csv")
        assert back.rows[:2] == log.rows[:2]
        assert math.isnan(back.rows[2].val_sens)
        assert back.column("epoch") == [1, 2, 1]

    def test_log_rejects_out_of_order_epochs(self):
        log = MetricsLog([LogRow(2, 0, 0, 0, 0, 0, 0)])
        with pytest.raises(DataError):
            log.append(LogRow(2, 0, 0, 0, 0, 0, 0))

    def test_bad_files(self, tmp_path):
        (tmp_path / "empty.csv").write_text("")
        with pytest.raises(DataError):
            MetricsLog.from_csv(tmp_path / "empty.csv")
        (tmp_path / "head.csv").write_text("epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens\n")
        with pytest.raises(DataError):
            MetricsLog.from_csv(tmp_path / "head.csv")
        (tmp_path / "wrong.csv").write_text("a,b\n1,2\n")
        with pytest.raises(FormatError):
            FrocCurve.from_csv(tmp_path / "wrong.csv")


def test_evaluate_fold_with_oracle_predictor(rng):
    records = []
    for i in range(6):
        nod = i % 2 == 0
        mask = np.zeros((2, 4, 4), np.uint8)
        if nod:
            mask[1, 1:3, 1:3] = 1
        records.append(CandidateRecord(f"r{i}", f"s{i // 3}", mask.astype(float), NODULE if nod else NON_NODULE, mask))

    def oracle(patches):
        p = np.array([[0.0, 1.0] if r.class_label == NODULE else [1.0, 0.0] for r in records])
        return p, patches[:, None]

    m = evaluate_fold(oracle, records)
    assert (m.dsc, m.sensitivity, m.froc_score, m.n_nodules) == (1.0, 1.0, 1.0, 3)
    with pytest.raises(DataError):
        evaluate_fold(oracle, [])
