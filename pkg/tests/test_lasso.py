import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from orthoforest.errors import ConfigError, ShapeError, WeightError
from orthoforest.lasso import check_weights, fit_weighted_lasso, lasso_objective, soft_threshold


class TestSoftThreshold:
    @pytest.mark.parametrize("x, t, expected", [(3.0, 1.0, 2.0), (-3.0, 1.0, -2.0), (0.5, 1.0, 0.0), (-1.0, 1.0, 0.0)])
    def test_values(self, x, t, expected):
        assert soft_threshold(x, t) == expected


class TestCheckWeights:
    def test_rescaled_to_n(self):
        w = check_weights(np.array([1.0, 3.0]), 2)
        np.testing.assert_allclose(w, [0.5, 1.5])

    def test_rejects_bad_weights(self):
        with pytest.raises(WeightError):
            check_weights(np.zeros(3), 3)
        with pytest.raises(WeightError):
            check_weights(np.array([1.0, -1.0]), 2)
        with pytest.raises(ShapeError):
            check_weights(np.ones(3), 4)


class TestFitWeightedLasso:
    def test_exact_line(self):
        x = np.linspace(-1.0, 1.0, 50)
        model = fit_weighted_lasso(x[:, None], 2.0 * x, np.ones(50), lam=0.0)
        assert model.coef[0] == pytest.approx(2.0, abs=1e-10)
        assert model.intercept == pytest.approx(0.0, abs=1e-10)

    def test_full_shrinkage(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(80, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=80)
        w = np.ones(80)
        Xc = X - X.mean(axis=0)
        lam = 2.0 * np.max(np.abs(w @ (Xc * (y - y.mean())[:, None]))) + 1e-9
        model = fit_weighted_lasso(X, y, w, lam)
        np.testing.assert_array_equal(model.coef, np.zeros(3))
        assert model.intercept == pytest.approx(y.mean())

    def test_single_standardized_feature_matches_soft_threshold(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=100)
        x = (x - x.mean()) / x.std()
        y = 0.3 * x + rng.normal(size=100)
        lam = 1.0
        model = fit_weighted_lasso(x[:, None], y, np.ones(100), lam)

        yc = y - y.mean()
        expected = soft_threshold(float(x @ yc), lam / 2.0) / float(x @ x)
        assert model.coef[0] == pytest.approx(expected, abs=1e-8)

        def objective(b):
            return lasso_objective(x[:, None], y, np.ones(100), np.array([b]), y.mean() - b * x.mean(), lam)

        best = minimize_scalar(objective, bounds=(-5.0, 5.0), method="bounded", options={"xatol": 1e-10})
        assert model.coef[0] == pytest.approx(best.x, abs=1e-6)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(60, 4))
        y = X[:, 0] - X[:, 2] + 0.1 * rng.normal(size=60)
        w = rng.uniform(0.2, 2.0, size=60)
        a = fit_weighted_lasso(X, y, w, 0.5)
        b = fit_weighted_lasso(X, y, 37.0 * w, 0.5)
        np.testing.assert_allclose(a.coef, b.coef, rtol=1e-10, atol=1e-12)
        assert a.intercept == pytest.approx(b.intercept, rel=1e-10)

    def test_objective_never_increases(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(100, 5))
        X[:, 1] += 0.8 * X[:, 0]
        y = X @ np.array([1.0, 0.5, 0.0, -1.0, 0.2]) + rng.normal(size=100)
        w = rng.uniform(0.5, 1.5, size=100)
        history = []

        def record(sweep, coef, intercept):
            history.append(lasso_objective(X, y, w, coef, intercept, 2.0))

        fit_weighted_lasso(X, y, w, 2.0, callback=record)
        assert len(history) >= 2
        steps = np.diff(history)
        assert np.all(steps <= 1e-9 * abs(history[0]))

    def test_constant_column_gets_zero(self):
        rng = np.random.default_rng(6)
        X = np.column_stack([rng.normal(size=40), np.full(40, 3.0)])
        y = 2.0 * X[:, 0] + 1.0
        model = fit_weighted_lasso(X, y, np.ones(40), 0.0)
        assert model.coef[1] == 0.0
        assert model.coef[0] == pytest.approx(2.0, abs=1e-8)

    def test_errors(self):
        X = np.ones((3, 1))
        with pytest.raises(WeightError):
            fit_weighted_lasso(X, np.ones(3), np.zeros(3), 0.1)
        with pytest.raises(ShapeError):
            fit_weighted_lasso(X, np.ones(4), np.ones(4), 0.1)
        with pytest.raises(ConfigError):
            fit_weighted_lasso(X, np.ones(3), np.ones(3), -1.0)

    def test_predict_shape_check(self):
        model = fit_weighted_lasso(np.eye(3), np.arange(3.0), np.ones(3), 0.0)
        with pytest.raises(ShapeError):
            model.predict(np.ones((2, 2)))
