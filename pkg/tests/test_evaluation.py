import json

import numpy as np
import pytest

from gazeclass import ASD, TD
from gazeclass.errors import EvaluationError, PlanError
from gazeclass.evaluation import (
    compute_metrics,
    count_correct,
    make_kfold_plan,
    make_loocv_plan,
    pair_count_auc,
    predict_subject,
    prediction_from_probs,
    roc_auc,
    subject_recognized,
    write_metrics_json,
)


def probs_with(n_correct, label, n=10):
    p_true = np.r_[np.full(n_correct, 0.8), np.full(n - n_correct, 0.3)]
    probs = np.empty((n, 2))
    probs[:, label] = p_true
    probs[:, 1 - label] = 1 - p_true
    return probs


class TestScoringRules:
    def test_six_of_ten_is_recognized(self):
        pred = prediction_from_probs("asd01", ASD, probs_with(6, ASD))
        assert pred.n_correct == 6
        assert pred.classification_score == pytest.approx(0.6)
        assert pred.correct

    def test_five_of_ten_is_not(self):
        pred = prediction_from_probs("td01", TD, probs_with(5, TD))
        assert pred.classification_score == pytest.approx(0.5)
        assert not pred.correct

    def test_probability_exactly_half_is_wrong(self):
        assert count_correct(np.full((10, 2), 0.5), ASD) == 0

    def test_integer_threshold(self):
        assert subject_recognized(3, 5)
        assert not subject_recognized(2, 5)

    def test_model_acc_is_mean_score(self):
        preds = [
            prediction_from_probs("td01", TD, probs_with(10, TD)),
            prediction_from_probs("td02", TD, probs_with(4, TD)),
            prediction_from_probs("asd01", ASD, probs_with(7, ASD)),
            prediction_from_probs("asd02", ASD, probs_with(0, ASD)),
        ]
        report = compute_metrics(preds)
        assert report.model_acc == pytest.approx((1.0 + 0.4 + 0.7 + 0.0) / 4)
        assert report.subject_acc == pytest.approx(0.5)
        assert report.sensitivity == pytest.approx(0.5)
        assert report.specificity == pytest.approx(0.5)

    def test_one_class_cohort(self):
        preds = [prediction_from_probs("td01", TD, probs_with(10, TD))]
        with pytest.raises(EvaluationError):
            compute_metrics(preds)

    def test_missing_variants(self, planted_head, planted_features):
        with pytest.raises(EvaluationError, match="missing"):
            predict_subject(planted_head, planted_features, "td0", variants=range(9))


class TestPlans:
    def test_loocv_39(self):
        ids = [f"s{i:02d}" for i in range(39)]
        plan = make_loocv_plan(ids)
        assert len(plan.folds) == 39
        assert sorted(s for f in plan.folds for s in f.test) == ids
        assert all(len(f.train) == 38 for f in plan.folds)

    def test_kfold_13_of_39(self):
        ids = [f"s{i:02d}" for i in range(39)]
        plan = make_kfold_plan(ids, 13, seed=3)
        assert [len(f.test) for f in plan.folds] == [3] * 13
        assert sorted(s for f in plan.folds for s in f.test) == ids
        assert plan.to_dict() == make_kfold_plan(ids, 13, seed=3).to_dict()

    def test_uneven_kfold(self):
        plan = make_kfold_plan(list("abcdefg"), 3)
        assert sorted(len(f.test) for f in plan.folds) == [2, 2, 3]

    @pytest.mark.parametrize("k", [1, 8])
    def test_bad_k(self, k):
        with pytest.raises(PlanError):
            make_kfold_plan(list("abcdefg"), k)


class TestRocAuc:
    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(4, 30))
            labels = rng.permutation(np.r_[[TD, ASD], rng.integers(0, 2, n - 2)])
            scores = np.round(rng.random(n), 1)
            assert roc_auc(scores, labels).auc == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)

    def test_all_ties(self):
        curve = roc_auc(np.full(6, 0.4), [0, 0, 0, 1, 1, 1])
        assert curve.auc == 0.5
        assert curve.points == [(0.0, 0.0), (1.0, 1.0)]

    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0

    def test_needs_both_classes(self):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1, 1])


class TestMetricsFile:
    def test_keys(self, tmp_path):
        preds = [
            prediction_from_probs("td01", TD, probs_with(9, TD)),
            prediction_from_probs("asd01", ASD, probs_with(8, ASD)),
        ]
        plan = make_loocv_plan(["td01", "asd01"])
        write_metrics_json(tmp_path / "metrics.json", plan, preds, compute_metrics(preds))
        payload = json.loads((tmp_path / "metrics.json").read_text())
        assert set(payload) >= {"plan", "per_subject", "subject_acc", "sen", "spe", "auc", "model_acc"}
        assert payload["auc"] == 1.0
        assert payload["per_subject"][1]["label"] == "ASD"
