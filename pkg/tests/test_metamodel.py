import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgnseg.metamodel import (
    DegenerateTargetError,
    LinearModel,
    SingularSystemError,
    Standardizer,
    UndefinedMetricError,
    auroc,
    evaluate_meta_models,
    fit_least_squares,
    fit_logistic,
    r_squared,
    split_mask,
)
from pgnseg.segments import SegmentTable


def pairwise_auroc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_three_point_example(self):
        # both positives score below the only negative
        assert pairwise_auroc([0.9, 0.8, 0.1], [0, 1, 1]) == 0.0
        assert auroc([0.9, 0.8, 0.1], [0, 1, 1]) == 0.0

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
    def test_matches_pairwise(self, rows):
        scores = [s / 3 for s, _ in rows]
        labels = [y for _, y in rows]
        if all(labels) or not any(labels):
            return
        assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)

    def test_monotone_and_sign_flip(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=200)
        y = rng.random(200) < 0.4
        a = auroc(s, y)
        assert auroc(np.exp(3 * s) + 1, y) == pytest.approx(a, abs=1e-15)
        assert a + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


class TestRSquared:
    def test_perfect(self):
        assert r_squared([1, 2, 3], [1, 2, 3]) == 1.0

    def test_constant_target(self):
        assert r_squared([0.1, 0.4], [0.5, 0.5]) == 0.0

    def test_mean_predictor(self):
        t = np.array([0.0, 1.0, 2.0])
        assert r_squared(np.full(3, 1.0), t) == 0.0


class TestStandardizer:
    def test_idempotent(self):
        x = np.random.default_rng(1).normal(3, 2, size=(50, 4))
        z = Standardizer.fit(x).transform(x)
        np.testing.assert_allclose(Standardizer.fit(z).transform(z), z, atol=1e-12)

    def test_zero_variance_column(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        z = Standardizer.fit(x).transform(x)
        assert np.all(z[:, 1] == 0) and not np.isnan(z).any()


class TestLogistic:
    def test_separable(self):
        x = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
        t = np.array([0, 0, 0, 1, 1, 1])
        model = fit_logistic(x, t)
        assert auroc(model.decision_function(x), t) == 1.0
        assert model.weights.shape == (1,)

    def test_noise_feature(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1000, 1))
        t = rng.random(1000) < 0.5
        model = fit_logistic(x, t)
        assert 0.4 <= auroc(model.decision_function(x), t) <= 0.6

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(100, 3))
        t = (x[:, 0] + rng.normal(size=100)) > 0
        a, b = fit_logistic(x, t), fit_logistic(x, t)
        assert np.array_equal(a.weights, b.weights) and a.intercept == b.intercept

    def test_converges_to_stationary_point(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 2))
        t = (x @ [1.0, -2.0] + rng.normal(size=200)) > 0
        l2 = 1e-2
        m = fit_logistic(x, t, l2=l2)
        z = m.standardizer.transform(x)
        p = m.predict(x)
        grad_w = z.T @ (p - t) / len(t) + l2 * m.weights
        grad_b = np.mean(p - t)
        assert np.abs(grad_w).max() < 1e-8 and abs(grad_b) < 1e-8

    def test_single_class(self):
        with pytest.raises(DegenerateTargetError):
            fit_logistic(np.ones((4, 1)), np.zeros(4))

    def test_json_round_trip(self):
        x = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]])
        m = fit_logistic(x, [0, 0, 1, 1], feature_names=["a", "b"])
        back = LinearModel.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.predict(x), m.predict(x))
        assert back.feature_names == ["a", "b"]


class TestLeastSquares:
    def test_exactly_linear(self):
        rng = np.random.default_rng(5)
        x = rng.random((60, 3))
        t = 0.1 + 0.2 * x[:, 0] + 0.3 * x[:, 1] - 0.05 * x[:, 2]
        m = fit_least_squares(x, t, ridge=0.0)
        assert r_squared(m.predict(x), t) == pytest.approx(1.0, abs=1e-9)

    def test_constant_target(self):
        x = np.random.default_rng(6).random((20, 2))
        m = fit_least_squares(x, np.full(20, 0.4))
        np.testing.assert_allclose(m.predict(x), 0.4, atol=1e-12)
        assert r_squared(m.predict(x), np.full(20, 0.4)) == 0.0

    def test_signal_plus_noise(self):
        rng = np.random.default_rng(8)
        x = rng.random((500, 3))
        t = x[:, 0] + rng.normal(0, 0.1, 500)
        m = fit_least_squares(x, t)
        assert r_squared(m.decision_function(x), t) > 0.8

    def test_training_fit_beats_mean(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(40, 4))
        t = rng.random(40)
        m = fit_least_squares(x, t)
        assert r_squared(m.decision_function(x), t) >= 0.0

    def test_predictions_clamped(self):
        x = np.arange(10.0).reshape(-1, 1)
        m = fit_least_squares(x, 0.3 * x[:, 0])
        p = m.predict(x)
        assert p.min() >= 0 and p.max() == 1.0

    def test_singular_without_ridge(self):
        x = np.column_stack([np.arange(6.0), 2 * np.arange(6.0)])
        with pytest.raises(SingularSystemError):
            fit_least_squares(x, np.arange(6.0), ridge=0.0)
        with pytest.raises(SingularSystemError):
            fit_least_squares(np.ones((2, 3)), np.zeros(2), ridge=0.0)

    def test_collinear_with_ridge(self):
        x = np.column_stack([np.arange(6.0), 2 * np.arange(6.0)])
        m = fit_least_squares(x, np.arange(6.0) / 10)
        assert np.isfinite(m.weights).all()

    def test_no_rows(self):
        with pytest.raises(DegenerateTargetError):
            fit_least_squares(np.zeros((0, 2)), np.zeros(0))


class TestSplitAndEvaluate:
    def test_split_deterministic_and_balanced(self):
        ids = np.arange(2000)
        a = split_mask(np.zeros(2000), ids)
        assert np.array_equal(a, split_mask(np.zeros(2000), ids))
        assert 0.65 < a.mean() < 0.75

    def _table(self, n, iou):
        rng = np.random.default_rng(11)
        feats = np.column_stack([iou + rng.normal(0, 0.05, n), rng.normal(size=n)])
        return SegmentTable(feats, ["f", "noise"], np.arange(1, n + 1), np.zeros(n, int),
                            np.zeros(n, int), iou, np.zeros(n, bool))

    def test_informative_feature(self):
        rng = np.random.default_rng(12)
        iou = np.where(rng.random(300) < 0.3, 0.0, rng.uniform(0.2, 1.0, 300))
        res = evaluate_meta_models(self._table(300, iou))
        assert res["auroc"] > 0.9 and res["r2"] > 0.8
        assert res["n_train"] + res["n_test"] == 300

    def test_single_class_reported_not_raised(self):
        res = evaluate_meta_models(self._table(50, np.ones(50)))
        assert res["auroc"] is None and "auroc" in res["errors"]
        assert res["r2"] == 0.0

    def test_nan_iou_rows_dropped(self):
        iou = np.tile([0.0, 0.5, np.nan], 40)
        res = evaluate_meta_models(self._table(120, iou))
        assert res["n_train"] + res["n_test"] == 80
