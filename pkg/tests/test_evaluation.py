"""Verification metrics, consistency diagnostics and tracking scores."""

import numpy as np
import pytest

from promptrack.datamodel import Observation
from promptrack.evaluation import (aggregate_equal_weight,
                                   consistency_metrics, evaluate_embeddings,
                                   mot_metrics, pair_protocol,
                                   render_threshold_table, threshold_metrics)


def gt_obs(frame, tid, x, y=10.0, w=30.0, h=60.0):
    return Observation(id=tid, frame=frame, x1=x, y1=y, x2=x + w, y2=y + h,
                       score=1.0)


class TestPairProtocol:
    def test_matched_and_cross_pairs(self):
        m = np.eye(3)
        ids = np.array([1, 1, 2])
        matched, cross = pair_protocol(m, m, ids)
        np.testing.assert_allclose(matched, 1.0)
        # ids (1,1,2): rows 0,1 vs 2 and row 2 vs 0,1 cross over
        assert cross.shape == (4,)
        np.testing.assert_allclose(cross, 0.0)

    def test_scale_free(self, rng):
        m = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        ids = np.array([1, 1, 2, 2, 3])
        a = pair_protocol(m, v, ids)
        b = pair_protocol(m * 7.0, v * 0.1, ids)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            pair_protocol(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros(3))
        with pytest.raises(ValueError):
            pair_protocol(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros(2))


class TestThresholdMetrics:
    def test_hand_counts(self):
        matched = np.array([0.9, 0.6, 0.4])
        unmatched = np.array([0.8, 0.3, 0.2, 0.1])
        row = threshold_metrics(matched, unmatched, 0.5)
        assert (row["tp"], row["fn"], row["fp"]) == (2, 1, 1)
        assert row["precision"] == 2 / 3
        assert row["recall"] == 2 / 3
        assert abs(row["f1"] - 2 / 3) < 1e-12

    def test_boundary_is_a_miss(self):
        row = threshold_metrics(np.array([0.5]), np.array([0.5]), 0.5)
        assert row["tp"] == 0 and row["fn"] == 1 and row["fp"] == 0

    def test_empty_denominators(self):
        row = threshold_metrics(np.zeros(0), np.zeros(0), 0.5)
        assert row["precision"] == 0.0 and row["recall"] == 0.0
        assert row["f1"] == 0.0

    def test_recall_monotone_in_threshold(self, rng):
        matched = rng.uniform(-1, 1, size=50)
        unmatched = rng.uniform(-1, 1, size=80)
        recalls = [threshold_metrics(matched, unmatched, t)["recall"]
                   for t in (0.5, 0.6, 0.7, 0.8)]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))


class TestConsistency:
    def test_translation_shows_up_in_both(self, rng):
        """V = M + c gives gap = alignment = |c|^2 exactly."""
        m = rng.normal(size=(6, 4))
        c = np.array([1.0, -2.0, 0.5, 0.0])
        out = consistency_metrics(m, m + c)
        want = float(np.sum(c ** 2))
        assert abs(out["modality_gap"] - want) < 1e-9
        assert abs(out["alignment"] - want) < 1e-9

    def test_identical_embeddings_are_zero(self, rng):
        m = rng.normal(size=(5, 3))
        out = consistency_metrics(m, m.copy())
        assert out["modality_gap"] == 0.0 and out["alignment"] == 0.0

    def test_gap_bounded_by_alignment(self, rng):
        """Centroid distance can never exceed the mean pair distance."""
        for _ in range(10):
            m = rng.normal(size=(8, 5))
            v = rng.normal(size=(8, 5))
            out = consistency_metrics(m, v)
            assert out["modality_gap"] <= out["alignment"] + 1e-12


class TestEvaluateEmbeddings:
    def test_normalizes_before_scoring(self, rng):
        m = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 4))
        ids = np.array([1, 1, 2, 2, 3, 3])
        a = evaluate_embeddings(m, m, v, ids)
        b = evaluate_embeddings(m * 5.0, m, v * 0.2, ids)
        assert a["per_threshold"] == b["per_threshold"]
        for key in ("modality_gap", "alignment"):
            assert abs(a["consistency"][key] - b["consistency"][key]) < 1e-12

    def test_branch_average(self, rng):
        """With identical branches the average equals either branch."""
        m = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 4))
        ids = np.array([1, 1, 2, 2, 3, 3])
        rep = evaluate_embeddings(m, m.copy(), v, ids)
        for i, row in enumerate(rep["per_threshold"]):
            exp_row = rep["branches"]["explicit"]["thresholds"][i]
            for key in ("precision", "recall", "f1"):
                assert abs(row[key] - exp_row[key]) < 1e-12

    def test_perfect_embeddings_session(self):
        """One-hot embeddings by identity score perfectly at every threshold."""
        ids = np.array([1, 1, 2, 2])
        m = np.eye(4)[[0, 0, 1, 1]]
        rep = evaluate_embeddings(m, m, m, ids)
        for row in rep["per_threshold"]:
            assert row["precision"] == 1.0 and row["recall"] == 1.0
        assert rep["consistency"]["modality_gap"] == 0.0


class TestMotMetrics:
    def make_gt(self):
        gt = {}
        for f in range(1, 5):
            gt[f] = [gt_obs(f, 1, 10.0 + 4 * f), gt_obs(f, 2, 200.0)]
        return gt

    def test_self_evaluation_is_perfect(self):
        gt = self.make_gt()
        m = mot_metrics(gt, gt)
        assert m["idf1"] == 1.0 and m["mota"] == 1.0
        assert m["fragments"] == 0.0 and m["fn"] == 0.0 and m["fp"] == 0.0

    def test_identity_switch_counted_and_scored(self):
        """Hand-checked IDF1/MOTA for one mid-track identity swap."""
        gt = self.make_gt()
        result = {}
        for f in range(1, 5):
            pid = 10 if f <= 2 else 20
            result[f] = [gt_obs(f, pid, 10.0 + 4 * f), gt_obs(f, 30, 200.0)]
        m = mot_metrics(result, gt)
        # identity 1 splits 2+2 across preds 10/20, identity 2 keeps pred 30:
        # idtp = 2 + 4, denominator = 8 + 8
        assert abs(m["idf1"] - 0.75) < 1e-12
        assert m["fragments"] == 1.0
        assert abs(m["mota"] - (1.0 - 1.0 / 8.0)) < 1e-12

    def test_missed_and_false_boxes(self):
        gt = self.make_gt()
        result = {f: [gt_obs(f, 10, 10.0 + 4 * f)] for f in range(1, 5)}
        result[1].append(gt_obs(1, 99, 120.0, y=150.0))
        m = mot_metrics(result, gt)
        assert m["fn"] == 4.0 and m["fp"] == 1.0

    def test_result_frames_must_exist_in_gt(self):
        gt = self.make_gt()
        result = dict(gt)
        result[9] = [gt_obs(9, 1, 10.0)]
        with pytest.raises(ValueError, match="missing"):
            mot_metrics(result, gt)

    def test_empty_result(self):
        gt = self.make_gt()
        m = mot_metrics({}, gt)
        assert m["idf1"] == 0.0 and m["fn"] == 8.0 and m["pred_total"] == 0.0


class TestReporting:
    def test_aggregate_means_shared_numeric_keys(self):
        out = aggregate_equal_weight([
            {"idf1": 1.0, "mota": 0.5, "name": "a"},
            {"idf1": 0.0, "mota": 1.0, "extra": 3}])
        assert out == {"idf1": 0.5, "mota": 0.75}

    def test_aggregate_rejects_empty(self):
        with pytest.raises(ValueError):
            aggregate_equal_weight([])

    def test_render_table(self):
        rows = [{"threshold": 0.5, "precision": 1.0, "recall": 0.5,
                 "f1": 2 / 3}]
        text = render_threshold_table(rows, title="holdout")
        lines = text.splitlines()
        assert lines[0] == "holdout"
        assert "precision" in lines[1]
        assert lines[2].split() == ["0.50", "1.0000", "0.5000", "0.6667"]
