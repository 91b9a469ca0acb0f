import logging

import numpy as np
import pytest

from orthoforest.errors import NonConcaveError, PolicyError
from orthoforest.forest import EffectEstimate
from orthoforest.policy import (
    PolicyInputs,
    grid_search_price,
    optimal_price,
    policy_inputs_from_effects,
    price_windows,
    revenue,
    revenue_curve,
)


def _inputs(beta, q=10.0, g=0.0, bounds=(0.0, 100.0), days=None):
    return PolicyInputs(np.asarray(beta, dtype=float), q, g, bounds, days)


class TestRevenue:
    def test_single_day(self):
        # Y = -0.1·T + 5 → Π(T) = 5T − 0.1T², peak at T = 25
        inputs = _inputs([-0.1], q=5.0)
        assert optimal_price(inputs) == pytest.approx(25.0)
        assert revenue(25.0, inputs) == pytest.approx(62.5)

    def test_levels_shift_intercept(self):
        # intercept q − β·g = 2 + 0.5·4 = 4 → T* = 4 / (2·0.5) = 4
        assert optimal_price(_inputs([-0.5], q=2.0, g=4.0)) == pytest.approx(4.0)

    def test_pooled_days(self):
        # intercepts 10 and 10, slopes −1 and −1 → T* = 20 / 4 = 5
        assert optimal_price(_inputs([-1.0, -1.0])) == pytest.approx(5.0)

    def test_mixed_slopes(self):
        inputs = _inputs([-1.0, -0.25], q=np.array([10.0, 30.0]))
        assert optimal_price(inputs) == pytest.approx(40.0 / 2.5)
        assert optimal_price(inputs) == pytest.approx(32.0 / 2.0)

    def test_grid_agrees_with_closed_form(self):
        inputs = _inputs([-0.3, -0.2, -0.4], q=7.0, g=1.0)
        t_star = optimal_price(inputs)
        assert abs(grid_search_price(inputs, 0.01) - t_star) <= 0.01

    def test_random_concave_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(1, 8))
            inputs = _inputs(-rng.uniform(0.05, 2.0, size=k), q=rng.uniform(0, 20, size=k),
                             g=rng.uniform(0, 5, size=k), bounds=(-50.0, 200.0))
            t_star = optimal_price(inputs)
            best = revenue(t_star, inputs)
            for p in np.linspace(-50.0, 200.0, 26):
                assert revenue(float(p), inputs) <= best + 1e-9 * (1 + abs(best))

    def test_not_concave(self):
        with pytest.raises(NonConcaveError):
            optimal_price(_inputs([0.1, -0.1]))

    def test_convex_grid_picks_boundary(self):
        inputs = _inputs([0.2], q=-1.0, bounds=(0.0, 10.0))
        assert grid_search_price(inputs, 0.5) == 10.0

    def test_clamped_to_bounds(self, caplog):
        inputs = _inputs([-0.1], q=5.0, bounds=(0.0, 10.0))
        with caplog.at_level(logging.WARNING, logger="orthoforest"):
            assert optimal_price(inputs) == 10.0
        assert "clamped" in caplog.text

    def test_outside_bounds(self):
        with pytest.raises(PolicyError):
            revenue(101.0, _inputs([-0.1]))

    def test_curve(self):
        prices, values = revenue_curve(_inputs([-0.1], q=5.0, bounds=(0.0, 50.0)), points=51)
        assert prices[0] == 0.0 and prices[-1] == 50.0
        assert int(np.argmax(values)) == 25

    def test_grid_step(self):
        with pytest.raises(PolicyError):
            grid_search_price(_inputs([-0.1]), 0.0)


class TestPolicyInputs:
    @pytest.mark.parametrize("kwargs", [
        {"beta": np.array([])},
        {"bounds": (5.0, 1.0)},
        {"q_hat": np.array([np.nan])},
        {"days": np.array([0.0, 1.0])},
    ])
    def test_invalid(self, kwargs):
        args = {"beta": np.array([-1.0]), "q_hat": 1.0, "g_hat": 0.0, "bounds": (0.0, 1.0)}
        args.update(kwargs)
        with pytest.raises(PolicyError):
            PolicyInputs(**args)

    def test_broadcast_levels(self):
        inputs = _inputs([-1.0, -2.0], q=3.0, g=1.0)
        np.testing.assert_allclose(inputs.intercepts, [4.0, 5.0])
        np.testing.assert_allclose(inputs.days, [0.0, 1.0])

    def test_window(self):
        inputs = _inputs([-1.0, -2.0, -3.0], days=[-1.0, 0.0, 1.0])
        np.testing.assert_allclose(inputs.window(0.0, 5.0).beta, [-2.0, -3.0])
        with pytest.raises(PolicyError):
            inputs.window(3.0, 4.0)

    def test_from_effects_sorted_by_day(self):
        est = [EffectEstimate((2.0,), -0.5), EffectEstimate((-1.0,), -0.1), EffectEstimate((0.0,), -0.3)]
        inputs = policy_inputs_from_effects(est, 4.0, 1.0, (0.0, 10.0), units="log")
        np.testing.assert_allclose(inputs.days, [-1.0, 0.0, 2.0])
        np.testing.assert_allclose(inputs.beta, [-0.1, -0.3, -0.5])
        assert inputs.units == "log"


class TestPriceWindows:
    DAYS = np.arange(-3.0, 4.0)
    WINDOWS = {"whole": (-3.0, 3.0), "pre": (-3.0, 0.0), "post": (1.0, 3.0)}

    def test_constant_slope_has_no_gain(self):
        inputs = _inputs(np.full(7, -0.5), q=6.0, days=self.DAYS)
        out = price_windows(inputs, self.WINDOWS)
        assert out["two_part_gain"] == pytest.approx(0.0, abs=1e-9)
        assert out["windows"]["pre"]["days"] == 4
        assert out["windows"]["post"]["days"] == 3

    def test_two_part_gain_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            inputs = _inputs(-rng.uniform(0.1, 1.0, size=7), q=rng.uniform(2, 8, size=7), days=self.DAYS)
            assert price_windows(inputs, self.WINDOWS)["two_part_gain"] >= -1e-9

    def test_actual_price_gap(self):
        inputs = _inputs(np.full(7, -0.1), q=5.0, days=self.DAYS)
        out = price_windows(inputs, self.WINDOWS, actual_price=20.0)
        assert out["actual"]["window"] == "whole"
        assert out["actual"]["price_gap"] == pytest.approx(5.0)
        assert out["actual"]["revenue_gap"] == pytest.approx(7 * (62.5 - 60.0))

    def test_non_concave_window_uses_grid(self, caplog):
        inputs = _inputs([0.5, -2.0, -2.0], q=1.0, bounds=(0.0, 4.0), days=[0.0, 1.0, 2.0])
        with caplog.at_level(logging.WARNING, logger="orthoforest"):
            out = price_windows(inputs, {"first": (0.0, 0.0), "all": (0.0, 2.0)}, grid_step=0.5)
        assert out["windows"]["first"]["concave"] is False
        assert out["windows"]["first"]["t_star"] == 4.0
        assert out["windows"]["all"]["concave"] is True
        assert "two_part_gain" not in out
        assert "not concave" in caplog.text
