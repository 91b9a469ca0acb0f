import numpy as np
import pytest

from orthoforest.errors import DivergenceError, ShapeError
from orthoforest.rng import make_rng
from orthoforest.sdnn import (
    SdnnArchitecture,
    TrainConfig,
    export_model,
    import_model,
    init_model,
    sdnn_forward,
    sdnn_loss_and_grad,
    train_sdnn,
)


def _finite_difference(model, inputs, y, w, lam, eps=1e-6):
    theta = model.flat()
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = eps
        up, _ = sdnn_loss_and_grad(model.with_flat(theta + step), inputs, y, w, lam)
        down, _ = sdnn_loss_and_grad(model.with_flat(theta - step), inputs, y, w, lam)
        grad[i] = (up - down) / (2 * eps)
    return grad


def make_holdout(n, cfg):
    """Rows train_sdnn holds out for early stopping under ``cfg``."""
    order = make_rng(cfg.seed, "sdnn-train").permutation(n)
    return order[:int(round(cfg.holdout_fraction * n))]


def _relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-3))


class TestArchitecture:
    def test_layer_shapes(self):
        arch = SdnnArchitecture(3, 2, hidden=(4, 5))
        model = init_model(arch, seed=0)
        assert [W.shape for W in model.weights] == [(3, 4), (4, 5)]
        assert model.top_coef.shape == (5,)
        assert model.n_params == 3 * 4 + 4 + 4 * 5 + 5 + 5 + 1

    def test_no_nonparametric_inputs_is_linear(self):
        arch = SdnnArchitecture(0, 3, hidden=(8,))
        assert arch.layers == ()
        assert init_model(arch, seed=0).n_params == 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            SdnnArchitecture(2, 1, activation="softplus")
        with pytest.raises(ValueError):
            SdnnArchitecture(2, 1, hidden=(0,))

    def test_flat_round_trip(self):
        model = init_model(SdnnArchitecture(2, 1, (3, 2)), seed=4)
        again = model.with_flat(model.flat())
        np.testing.assert_array_equal(again.flat(), model.flat())


class TestForward:
    def test_zero_network(self):
        model = init_model(SdnnArchitecture(2, 2, (5, 3)), seed=1)
        zero = model.with_flat(np.zeros(model.n_params))
        assert sdnn_forward(zero, wp=[1.5, -2.0], wn=[0.3], x=[4.0]) == 0.0

    def test_parametric_pass_through(self):
        model = init_model(SdnnArchitecture(2, 1, (3,)), seed=1)
        theta = np.zeros(model.n_params)
        theta[-2] = 1.0  # coefficient on the single parametric input
        passthrough = model.with_flat(theta)
        assert sdnn_forward(passthrough, wp=[7.25], wn=[1.0], x=[-3.0]) == 7.25

    def test_matches_hand_evaluation(self):
        arch = SdnnArchitecture(3, 2, (4, 3), activation="tanh")
        model = init_model(arch, seed=9)
        rng = np.random.default_rng(9)
        model = model.with_flat(model.flat() + 0.1 * rng.normal(size=model.n_params))
        x, wn, wp = np.array([0.4]), np.array([-1.2, 0.7]), np.array([2.0, -0.5])

        a = np.concatenate([x, wn])
        for W, b in zip(model.weights, model.biases):
            a = np.tanh(a @ W + b)
        expected = np.concatenate([a, wp]) @ model.top_coef + model.top_intercept

        assert sdnn_forward(model, wp, wn, x) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        model = init_model(SdnnArchitecture(2, 1, (3,)), seed=0)
        with pytest.raises(ShapeError):
            sdnn_forward(model, wp=[1.0, 2.0], wn=[1.0], x=[1.0])
        with pytest.raises(ShapeError):
            model.predict(np.ones((4, 3)), np.ones((4, 1)))

    def test_export_import(self):
        model = init_model(SdnnArchitecture(2, 1, (3,), "sigmoid"), seed=2, intercept=0.5, weight_decay=1e-3)
        back = import_model(export_model(model))
        np.testing.assert_array_equal(back.flat(), model.flat())
        assert back.arch == model.arch
        assert back.weight_decay == model.weight_decay


class TestGradient:
    def test_ten_parameter_net(self):
        arch = SdnnArchitecture(2, 1, (2,), activation="tanh")
        model = init_model(arch, seed=3)
        assert model.n_params == 10
        rng = np.random.default_rng(3)
        inputs = (rng.normal(size=(12, 2)), rng.normal(size=(12, 1)))
        y = rng.normal(size=12)
        w = rng.uniform(0.2, 2.0, size=12)
        _, analytic = sdnn_loss_and_grad(model, inputs, y, w, lam=0.01)
        numeric = _finite_difference(model, inputs, y, w, 0.01)
        assert _relative_error(analytic, numeric) < 1e-5

    @pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
    def test_random_parameter_points(self, activation):
        arch = SdnnArchitecture(3, 2, (4, 3), activation=activation)
        rng = np.random.default_rng(11)
        inputs = (rng.normal(size=(15, 3)), rng.normal(size=(15, 2)))
        y = rng.normal(size=15)
        w = rng.uniform(0.5, 1.5, size=15)
        base = init_model(arch, seed=11)
        for _ in range(20):
            model = base.with_flat(rng.normal(scale=0.5, size=base.n_params))
            _, analytic = sdnn_loss_and_grad(model, inputs, y, w, lam=1e-3)
            numeric = _finite_difference(model, inputs, y, w, 1e-3)
            assert _relative_error(analytic, numeric) < 1e-5

    def test_loss_is_weighted_mean_plus_penalty(self):
        model = init_model(SdnnArchitecture(1, 1, (2,)), seed=0)
        inputs = (np.array([[0.0], [1.0]]), np.array([[1.0], [2.0]]))
        y = np.array([0.5, -0.5])
        w = np.array([1.0, 3.0])
        loss, _ = sdnn_loss_and_grad(model, inputs, y, w, lam=0.1)
        r = model.predict(*inputs) - y
        theta = model.flat()
        assert loss == pytest.approx((w @ (r * r)) / 4.0 + 0.1 * theta @ theta)


class TestTraining:
    def test_zero_target(self):
        rng = np.random.default_rng(0)
        n = 256
        inputs = (rng.normal(size=(n, 1)), rng.normal(size=(n, 1)))
        cfg = TrainConfig(epochs=500, batch_size=n, lr=0.01, lr_decay=0.99, weight_decay=1e-4, patience=500, seed=1)
        model = train_sdnn((inputs, np.zeros(n)), np.ones(n), SdnnArchitecture(1, 1, (4,)), cfg)
        assert np.max(np.abs(model.predict(*inputs))) < 1e-2

    def test_linear_branch_reduces_to_weighted_least_squares(self):
        rng = np.random.default_rng(2)
        n = 500
        wp = rng.normal(size=(n, 3))
        y = 1.0 + wp @ np.array([0.5, -1.0, 2.0]) + 0.1 * rng.normal(size=n)
        w = rng.uniform(0.5, 2.0, size=n)
        cfg = TrainConfig(
            epochs=1000, batch_size=n, lr=0.05, lr_decay=0.99, weight_decay=0.0,
            patience=1000, holdout_fraction=0.0, seed=2,
        )
        model = train_sdnn(((np.zeros((n, 0)), wp), y), w, SdnnArchitecture(0, 3), cfg)

        design = np.column_stack([np.ones(n), wp]) * np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(design, y * np.sqrt(w), rcond=None)
        np.testing.assert_allclose(model.top_coef, coef[1:], atol=1e-3)
        assert model.top_intercept == pytest.approx(coef[0], abs=1e-3)

    def test_held_out_loss_not_worse_than_start(self):
        rng = np.random.default_rng(5)
        n = 200
        inputs = (rng.normal(size=(n, 2)), rng.normal(size=(n, 1)))
        y = np.sin(inputs[0][:, 0]) + inputs[1][:, 0]
        cfg = TrainConfig(epochs=3, seed=5)
        arch = SdnnArchitecture(2, 1, (6,))
        trained = train_sdnn((inputs, y), np.ones(n), arch, cfg)
        hold = make_holdout(n, cfg)
        start = init_model(arch, cfg.seed, intercept=float(y.mean()))
        before = np.mean((start.predict(inputs[0][hold], inputs[1][hold]) - y[hold]) ** 2)
        after = np.mean((trained.predict(inputs[0][hold], inputs[1][hold]) - y[hold]) ** 2)
        assert after <= before + 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        inputs = (rng.normal(size=(80, 1)), rng.normal(size=(80, 1)))
        y = inputs[0][:, 0] ** 2
        cfg = TrainConfig(epochs=5, seed=3)
        arch = SdnnArchitecture(1, 1, (5,))
        a = train_sdnn((inputs, y), np.ones(80), arch, cfg)
        b = train_sdnn((inputs, y), np.ones(80), arch, cfg)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_divergence_reports_epoch(self):
        rng = np.random.default_rng(7)
        n = 40
        inputs = (rng.normal(size=(n, 1)), rng.normal(size=(n, 1)))
        y = 1e200 * rng.uniform(1.0, 2.0, size=n)
        with pytest.raises(DivergenceError) as exc:
            train_sdnn((inputs, y), np.ones(n), SdnnArchitecture(1, 1, (3,)), TrainConfig(epochs=3))
        assert exc.value.epoch == 1

    @pytest.mark.slow
    def test_recovers_parametric_coefficients(self):
        rng = np.random.default_rng(8)
        n = 5000
        beta = np.array([0.8, -0.4])
        wp = rng.normal(size=(n, 2))
        nonparametric = rng.normal(size=(n, 3))
        y = wp @ beta + 0.1 * rng.normal(size=n)
        arch = SdnnArchitecture(3, 2, (16, 16))
        model = train_sdnn(((nonparametric, wp), y), np.ones(n), arch, TrainConfig(epochs=100, seed=8))
        np.testing.assert_allclose(model.top_coef[-2:], beta, atol=0.05)
