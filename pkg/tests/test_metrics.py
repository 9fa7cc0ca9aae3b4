import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from graphseg.metrics import (MetricError, MetricReport, brier_nll,
                              confusion_matrix, dice_scores, ece,
                              quadratic_kappa, reliability_bins,
                              save_reliability_csv, weighted_f1)


class TestDice:
    def test_perfect_prediction(self):
        m = np.array([[0, 1], [2, 3]])
        per_class, avg = dice_scores([m], [m], classes=range(4))
        assert all(per_class[c] == 1.0 for c in range(4))
        assert avg == 1.0

    def test_half_overlap(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [1, 0]])
        per_class, avg = dice_scores([pred], [gt], classes=range(2))
        assert per_class[0] == 0.5 and per_class[1] == 0.5
        assert avg == 0.5

    def test_absent_class_excluded(self):
        pred = np.array([[0, 0]])
        gt = np.array([[0, 0]])
        per_class, avg = dice_scores([pred], [gt], classes=range(4))
        assert per_class[0] == 1.0
        assert per_class[1] is None and per_class[2] is None and per_class[3] is None
        assert avg == 1.0

    def test_micro_pooling_across_images(self):
        # pooled counts, not mean of per-image Dice
        pred = [np.array([[1]]), np.array([[1, 1, 1, 0]])]
        gt = [np.array([[0]]), np.array([[1, 1, 1, 1]])]
        per_class, _ = dice_scores(pred, gt, classes=range(2))
        # class 1: tp=3, fp=1, fn=1 -> 6/8
        assert per_class[1] == 0.75

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricError):
            dice_scores([np.zeros((2, 2))], [np.zeros((3, 3))], classes=range(2))

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_imgs = int(rng.integers(1, 4))
        preds = [rng.integers(0, 4, (int(rng.integers(1, 6)), int(rng.integers(1, 6))))
                 for _ in range(n_imgs)]
        gts = [rng.integers(0, 4, p.shape) for p in preds]
        per_class, avg = dice_scores(preds, gts, classes=range(4))
        o_per, o_avg = oracles.dice_oracle(preds, gts, classes=range(4))
        for c in range(4):
            if o_per[c] is None:
                assert per_class[c] is None
            else:
                assert abs(per_class[c] - o_per[c]) < 1e-12
        assert abs(avg - o_avg) < 1e-12


class TestWeightedF1:
    def test_perfect(self):
        assert weighted_f1([0, 1, 2], [0, 1, 2]) == 1.0

    def test_known_value(self):
        preds = [0, 0, 1, 1]
        gts = [0, 1, 1, 1]
        # class0: tp=1 fp=1 fn=0 -> f1=2/3, support 1
        # class1: tp=2 fp=0 fn=1 -> f1=4/5, support 3
        assert abs(weighted_f1(preds, gts) - (2 / 3 * 0.25 + 0.8 * 0.75)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            weighted_f1([], [])

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        preds = rng.integers(0, 6, n).tolist()
        gts = rng.integers(0, 6, n).tolist()
        assert abs(weighted_f1(preds, gts) - oracles.weighted_f1_oracle(preds, gts)) < 1e-12


class TestQuadraticKappa:
    def test_perfect_agreement(self):
        assert quadratic_kappa([0, 3, 5], [0, 3, 5]) == 1.0

    def test_degenerate_single_class(self):
        assert quadratic_kappa([2, 2], [2, 2]) == 1.0

    def test_worst_case_negative(self):
        assert quadratic_kappa([0, 5], [5, 0]) < 0

    def test_out_of_range_rejected(self):
        with pytest.raises(MetricError):
            quadratic_kappa([6], [0])

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        preds = rng.integers(0, 6, n).tolist()
        gts = rng.integers(0, 6, n).tolist()
        assert abs(quadratic_kappa(preds, gts)
                   - oracles.quadratic_kappa_oracle(preds, gts)) < 1e-12


class TestBrierNll:
    def test_perfect_confidence(self):
        probs = np.array([[1.0, 0, 0, 0]])
        brier, nll = brier_nll(probs, [0])
        assert brier == 0.0 and nll == 0.0

    def test_uniform(self):
        probs = np.array([[0.25] * 4])
        brier, nll = brier_nll(probs, [2])
        assert abs(brier - (0.75 ** 2 + 3 * 0.25 ** 2)) < 1e-12
        assert abs(nll - np.log(4)) < 1e-12

    def test_zero_prob_target_finite(self):
        probs = np.array([[1.0, 0.0]])
        _, nll = brier_nll(probs, [1])
        assert np.isfinite(nll)

    def test_invalid_rows_rejected(self):
        with pytest.raises(MetricError):
            brier_nll(np.array([[0.5, 0.6]]), [0])

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        raw = rng.random((n, 4)) + 1e-6
        probs = raw / raw.sum(axis=1, keepdims=True)
        targets = rng.integers(0, 4, n)
        brier, nll = brier_nll(probs, targets)
        assert abs(brier - oracles.brier_oracle(probs, targets)) < 1e-12
        assert abs(nll - oracles.nll_oracle(probs, targets)) < 1e-12


class TestEce:
    def test_worked_example(self):
        # bin (.8,.9]: {.9,.9} acc 1 conf .9 -> .5*.1
        # bin (.5,.6]: {.6,.6} acc .5 conf .6 -> .5*.1
        value = ece([0.9, 0.9, 0.6, 0.6], [True, True, True, False], num_bins=10)
        assert abs(value - 0.1) < 1e-12

    def test_perfectly_calibrated_zero(self):
        # accuracy in each bin equals the (constant) confidence in that bin
        confs = [0.25] * 4 + [0.75] * 4
        correct = [True, False, False, False] + [True, True, True, False]
        assert abs(ece(confs, correct, num_bins=2)) < 1e-12

    def test_boundary_goes_to_lower_bin(self):
        bins = reliability_bins([0.5], [True], num_bins=2)
        assert bins[0]["count"] == 1 and bins[1]["count"] == 0

    def test_zero_confidence_in_first_bin(self):
        bins = reliability_bins([0.0], [False], num_bins=10)
        assert bins[0]["count"] == 1

    def test_empty_bins_reported(self):
        bins = reliability_bins([0.95], [True], num_bins=10)
        assert len(bins) == 10
        assert sum(b["count"] for b in bins) == 1
        assert bins[9]["count"] == 1

    def test_out_of_range_rejected(self):
        with pytest.raises(MetricError):
            ece([1.5], [True])

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        confs = rng.random(n)
        correct = rng.random(n) < confs
        bins = int(rng.integers(1, 20))
        assert abs(ece(confs, correct, bins)
                   - oracles.ece_oracle(confs.tolist(), correct.tolist(), bins)) < 1e-12


class TestConfusionMatrix:
    def test_orientation(self):
        mat = confusion_matrix(preds=["a", "b"], gts=["b", "b"], labels=["a", "b"])
        # row = gt, column = pred
        assert np.array_equal(mat, [[0, 0], [1, 1]])

    def test_unknown_label_rejected(self):
        with pytest.raises(MetricError):
            confusion_matrix(["c"], ["a"], labels=["a", "b"])


class TestReportIO:
    def test_report_roundtrip(self, tmp_path):
        report = MetricReport(
            dice_per_class={"0": 0.5, "1": None},
            dice_avg=0.5,
            weighted_f1=0.9,
            quadratic_kappa=0.8,
            brier={"primary": 0.1},
            nll={"primary": 0.2},
            ece={"primary": 0.05},
            confusion={"primary": {"labels": ["B", "G3"], "matrix": np.eye(2, dtype=int)}},
            notes={"coerced_predictions": 1},
        )
        path = str(tmp_path / "report.json")
        report.save(path)
        import json
        with open(path) as f:
            doc = json.load(f)
        assert doc["dice_avg"] == 0.5
        assert doc["confusion"]["primary"]["matrix"] == [[1, 0], [0, 1]]
        assert doc["notes"]["coerced_predictions"] == 1

    def test_reliability_csv(self, tmp_path):
        bins = reliability_bins([0.3, 0.9], [False, True], num_bins=2)
        path = str(tmp_path / "rel.csv")
        save_reliability_csv(path, bins)
        with open(path) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "bin,lower,upper,count,mean_confidence,accuracy"
        assert len(lines) == 3
