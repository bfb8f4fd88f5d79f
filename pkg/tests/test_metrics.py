import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gkd.errors import NumericError, ParameterError
from gkd.metrics import (
    ConfusionCounts,
    GaussianStats,
    MetricsReport,
    auc,
    confusion_metrics,
    evaluate_predictions,
    frechet_distance,
    fsd,
    gap,
    gap_row,
    matrix_sqrt,
    reports_to_csv,
    reports_to_table,
)


def brute_counts(pred, mask, thr=0.5):
    tp = fp = fn = tn = 0
    for p, m in zip(np.ravel(pred), np.ravel(mask)):
        hit, pos = p > thr, m > 0.5
        tp += hit and pos
        fp += hit and not pos
        fn += (not hit) and pos
        tn += (not hit) and (not pos)
    return tp, fp, fn, tn


def pair_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


pixels = st.integers(1, 1000).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0])),
        arrays(np.float64, n, elements=st.sampled_from([0.0, 1.0])),
    )
)


class TestConfusion:
    @settings(max_examples=60, deadline=None)
    @given(pixels)
    def test_counts_match_brute_force(self, pm):
        pred, mask = pm
        c = ConfusionCounts.from_arrays(pred, mask)
        assert (c.tp, c.fp, c.fn, c.tn) == brute_counts(pred, mask)

    @settings(max_examples=60, deadline=None)
    @given(pixels)
    def test_metrics_from_counts(self, pm):
        pred, mask = pm
        tp, fp, fn, tn = brute_counts(pred, mask)
        m = confusion_metrics(pred, mask)
        assert m["acc"] == (tp + tn) / (tp + fp + fn + tn)
        if tp + fn:
            assert m["se"] == tp / (tp + fn)
            assert m["f1"] == 2 * tp / (2 * tp + fp + fn)
        else:
            assert math.isnan(m["se"]) and math.isnan(m["f1"])
        for v in m.values():
            assert math.isnan(v) or 0.0 <= v <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(pixels, st.integers(0, 999))
    def test_sharded_sum_equals_whole(self, pm, cut):
        pred, mask = pm
        cut = cut % (len(pred) + 1)
        parts = ConfusionCounts.from_arrays(pred[:cut], mask[:cut]) + ConfusionCounts.from_arrays(pred[cut:], mask[cut:])
        assert parts == ConfusionCounts.from_arrays(pred, mask)

    def test_miou_hand_case(self):
        pred = np.array([1, 1, 0, 0, 1.0])
        mask = np.array([1, 0, 0, 0, 1.0])
        # fg IoU 2/3, bg IoU 2/3
        assert confusion_metrics(pred, mask)["miou"] == pytest.approx(2 / 3)

    def test_no_positives_is_nan(self):
        m = confusion_metrics(np.zeros(4), np.zeros(4))
        assert math.isnan(m["se"]) and m["acc"] == 1.0 and m["miou"] == 1.0

    def test_shape_and_threshold_errors(self):
        with pytest.raises(ParameterError):
            confusion_metrics(np.zeros(3), np.zeros(4))
        with pytest.raises(ParameterError):
            confusion_metrics(np.zeros(3), np.zeros(3), threshold=1.0)


class TestAUC:
    def test_frozen_oracle(self):
        # value from sklearn.metrics.roc_auc_score
        s = [0.1, 0.4, 0.35, 0.8, 0.8, 0.2, 0.9, 0.5]
        l = [0, 0, 1, 1, 0, 0, 1, 1]
        assert auc(s, l) == pytest.approx(0.78125, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(pixels)
    def test_matches_pair_counting(self, pm):
        scores, labels = pm
        if labels.min() == labels.max():
            assert math.isnan(auc(scores, labels))
        else:
            assert auc(scores, labels) == pytest.approx(pair_auc(scores, labels), abs=1e-9)

    def test_perfect_and_inverted(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


class TestGap:
    def test_published_se_gaps(self):
        assert gap(0.9451, 0.8251) == pytest.approx(0.1200, abs=1e-12)
        assert gap(0.9613, 0.8356) == pytest.approx(0.1257, abs=1e-12)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_symmetric_nonnegative(self, a, b):
        assert gap(a, b) == gap(b, a) >= 0

    def test_gap_row(self):
        a = MetricsReport("m", "test_A", 0.9, 0.8, 0.7, 0.6, 0.5, fsd=3.0)
        b = MetricsReport("m", "test_B", 0.6, 0.9, 0.7, 0.4, 0.1, fsd=1.0)
        g = gap_row(a, b)
        assert g.dataset == "GAP"
        for k, v in g.values().items():
            assert v == pytest.approx(abs(getattr(a, k) - getattr(b, k)))


spd = st.integers(1, 5).flatmap(
    lambda c: arrays(np.float64, (c + 3, c), elements=st.floats(-3, 3, allow_subnormal=False))
)


class TestMatrixSqrt:
    @settings(max_examples=60, deadline=None)
    @given(spd)
    def test_round_trip(self, a):
        m = a.T @ a + 1e-3 * np.eye(a.shape[1])
        r = matrix_sqrt(m)
        assert np.linalg.norm(r @ r - m) <= 1e-5 * np.linalg.norm(m)
        assert np.allclose(r, r.T)

    def test_indefinite_rejected(self):
        with pytest.raises(NumericError):
            matrix_sqrt(np.diag([1.0, -1.0]))

    def test_nonsymmetric_rejected(self):
        with pytest.raises(ParameterError):
            matrix_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))


class TestFSD:
    def test_frozen_oracle(self):
        # value from scipy.linalg.sqrtm(cov_x @ cov_y) with the same eps
        rng = np.random.default_rng(7)
        x = rng.normal(size=(12, 3))
        y = rng.normal(loc=0.5, scale=1.3, size=(12, 3))
        assert fsd(x, y) == pytest.approx(3.7103160834968367, rel=1e-9)

    def test_self_distance_zero(self):
        x = np.random.default_rng(0).normal(size=(40, 6))
        assert abs(fsd(x, x)) < 1e-5

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(30, 4)), rng.normal(2, 0.5, size=(30, 4))
        assert fsd(x, y) == pytest.approx(fsd(y, x), abs=1e-5)

    def test_one_dimensional_closed_forms(self):
        # unit variance, means 0 and 1 -> 1
        a = GaussianStats(np.zeros(1), np.eye(1), 2)
        b = GaussianStats(np.ones(1), np.eye(1), 2)
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-6)
        # equal means, std 1 and 2 -> (2 - 1)^2
        c = GaussianStats(np.zeros(1), 4 * np.eye(1), 2)
        assert frechet_distance(a, c) == pytest.approx(1.0, abs=1e-6)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(50, 4)), rng.normal(1, 2, size=(50, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert fsd(x @ q, y @ q) == pytest.approx(fsd(x, y), abs=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative_and_translation(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        d = fsd(x, y)
        assert d > -1e-8
        shift = rng.normal(size=3)
        assert fsd(x + shift, y + shift) == pytest.approx(d, abs=1e-6)

    def test_too_few_samples(self):
        x = np.zeros((4, 4))
        with pytest.raises(ParameterError):
            fsd(x, x)

    def test_width_mismatch(self):
        with pytest.raises(ParameterError):
            fsd(np.zeros((10, 2)), np.zeros((10, 3)))


class TestReports:
    def rows(self):
        a = MetricsReport("student", "test_A", 0.9, 0.95, 0.99, 0.9, 0.85, fsd=1.5)
        b = MetricsReport("student", "test_B", 0.7, 0.9, math.nan, 0.8, 0.75)
        return [a, b, gap_row(a, b)]

    def test_csv_has_hash_and_nan(self):
        text = reports_to_csv(self.rows(), "abc123")
        lines = text.splitlines()
        assert lines[0] == "# config_hash=abc123"
        assert lines[1] == "model,dataset,se,acc,auc,f1,miou,fsd"
        assert lines[3].split(",")[4] == "nan"
        assert lines[4].startswith("student,GAP,0.2000")

    def test_table_layout(self):
        text = reports_to_table(self.rows(), "abc123")
        assert text.startswith("config_hash: abc123")
        assert "test_A" in text and "GAP" in text

    def test_evaluate_predictions_keys(self):
        out = evaluate_predictions(np.array([0.2, 0.8]), np.array([0.0, 1.0]))
        assert set(out) == {"se", "acc", "f1", "miou", "auc"}
        assert out["auc"] == 1.0
