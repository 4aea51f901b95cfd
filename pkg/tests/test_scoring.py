"""Tests for feature fusion, linear scoring and training-example partition."""

import json

import numpy as np
import pytest

from src.core_model import BoundingBox, Extent, ValidationError
from src.scoring import (
    LinearModel,
    fuse_features,
    l2_normalize,
    linear_score,
    load_features,
    load_model,
    partition_examples,
    score_video,
)

from builders import proposal, video, write_jsonl


class TestFusion:

    def test_unit_vector_unchanged(self):
        np.testing.assert_allclose(l2_normalize(np.array([0.0, 1.0, 0.0])), [0.0, 1.0, 0.0])

    def test_zero_vector_unchanged(self):
        np.testing.assert_array_equal(l2_normalize(np.zeros(3)), np.zeros(3))

    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_inputs_concatenate(self):
        fused = fuse_features(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        np.testing.assert_allclose(fused, [1.0, 0.0, 0.0, 1.0])

    def test_zero_flow_weight(self):
        fused = fuse_features(np.array([3.0, 4.0]), np.array([5.0, 7.0]), w_flow=0.0)
        np.testing.assert_allclose(fused[2:], [0.0, 0.0])

    def test_weighted_halves(self):
        fused = fuse_features(np.array([3.0, 4.0]), np.array([0.0, 2.0]), 1.0, 2.0)
        np.testing.assert_allclose(fused, [0.6, 0.8, 0.0, 2.0])


class TestLinearScore:

    def test_zero_weights_give_biases(self):
        model = LinearModel(("a", "b"), np.zeros((2, 3)), np.array([0.5, -1.0]))
        assert linear_score(np.array([1.0, 2.0, 3.0]), model) == (0.5, -1.0)

    def test_projection(self):
        model = LinearModel(("a",), np.array([[1.0, 0.0, 0.0]]), np.array([0.0]))
        assert linear_score(np.array([0.3, 0.9, -4.0]), model) == (0.3,)

    def test_matches_dot_products(self):
        rng = np.random.default_rng(5)
        weights = rng.normal(size=(3, 4))
        biases = rng.normal(size=3)
        x = rng.normal(size=4)
        model = LinearModel(("a", "b", "c"), weights, biases)
        expected = [sum(weights[c, i] * x[i] for i in range(4)) + biases[c] for c in range(3)]
        assert linear_score(x, model) == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        model = LinearModel(("a",), np.ones((1, 4)), np.zeros(1))
        with pytest.raises(ValidationError):
            linear_score(np.ones(3), model)

    def test_declared_dimension_must_match(self):
        with pytest.raises(ValidationError):
            LinearModel.from_dict({"class_names": ["a"], "feature_dim": 5, "weights": [[1, 2]], "biases": [0]})

    def test_weight_rows_per_class(self):
        with pytest.raises(ValidationError):
            LinearModel(("a", "b"), np.ones((1, 2)), np.zeros(1))


class TestScoreVideo:

    def test_scores_from_features(self, tmp_path):
        v = video([[((0, 0, 4, 4), (0.0, 0.0)), ((1, 1, 5, 5), (0.0, 0.0))], []])
        features_path = write_jsonl(tmp_path / "features.jsonl", [
            {"video_id": "v1", "frame": 1, "proposal_index": 0, "x_a": [3, 4], "x_f": [0, 0]},
            {"video_id": "v1", "frame": 1, "proposal_index": 1, "x_a": [0, 0], "x_f": [0, 5]},
        ])
        model_path = tmp_path / "model.json"
        model_path.write_text(json.dumps({
            "class_names": ["jump", "run", "sit"],
            "feature_dim": 4,
            "weights": [[1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 0, 0]],
            "biases": [0.0, 0.5, -2.0],
        }))

        scored = score_video(v, load_features(features_path), load_model(str(model_path)))
        assert scored.class_names == ("jump", "run", "sit")
        assert scored.frame(1)[0].scores == pytest.approx((1.4, 0.5, -2.0))
        assert scored.frame(1)[1].scores == pytest.approx((0.0, 1.5, -2.0))
        assert scored.frame(1)[1].box == BoundingBox(1, 1, 5, 5)

    def test_missing_features(self):
        v = video([[((0, 0, 4, 4), (0.0, 0.0))]])
        model = LinearModel(("a",), np.ones((1, 4)), np.zeros(1))
        with pytest.raises(ValidationError, match="no features"):
            score_video(v, {}, model)

    def test_extra_features(self):
        v = video([[((0, 0, 4, 4), (0.0, 0.0))]])
        model = LinearModel(("a",), np.ones((1, 4)), np.zeros(1))
        features = {
            ("v1", 1, 0): (np.ones(2), np.ones(2)),
            ("v1", 1, 1): (np.ones(2), np.ones(2)),
        }
        with pytest.raises(ValidationError):
            score_video(v, features, model)

    def test_duplicate_feature_records(self, tmp_path):
        record = {"video_id": "v1", "frame": 1, "proposal_index": 0, "x_a": [1], "x_f": [1]}
        path = write_jsonl(tmp_path / "features.jsonl", [record, record])
        with pytest.raises(ValidationError, match="duplicate"):
            load_features(path)


class TestPartition:

    GT = (Extent(BoundingBox(0, 0, 100, 100)), "walking")

    def test_buckets(self):
        good = proposal(1, (0, 0, 80, 100), ())     # IoU 0.8
        poor = proposal(1, (0, 0, 20, 100), ())     # IoU 0.2
        middling = proposal(1, (0, 0, 50, 100), ())  # IoU 0.5
        result = partition_examples([good, poor, middling], [self.GT])
        assert result.positives == [self.GT, (good, "walking")]
        assert result.negatives == [poor]
        assert result.ignored == [middling]

    def test_positive_takes_best_ground_truth_class(self):
        other = (Extent(BoundingBox(0, 0, 50, 100)), "running")
        p = proposal(1, (0, 0, 45, 100), ())
        result = partition_examples([p], [self.GT, other], pos_iou=0.75, neg_iou=0.3)
        assert result.positives[-1] == (p, "running")

    def test_no_ground_truth(self):
        p = proposal(1, (0, 0, 10, 10), ())
        result = partition_examples([p], [])
        assert result.positives == []
        assert result.negatives == [p]

    def test_equal_thresholds_leave_nothing_ignored(self):
        middling = proposal(1, (0, 0, 50, 100), ())
        result = partition_examples([middling], [self.GT], pos_iou=0.5, neg_iou=0.5)
        assert result.ignored == []
        assert result.negatives == [middling]
