import dataclasses

import numpy as np
import pytest

from orthoforest.artifacts import load_json, save_json
from orthoforest.data import IndexSplit
from orthoforest.errors import ConfigError, NotFittedError, NoTreatmentVariationError, SizeError
from orthoforest.forest import (
    EffectEstimate,
    KernelForest,
    bootstrap_ci,
    estimate_effect,
    estimate_effects,
    fit_orf,
    forest_weights,
    kernel_regression,
    model_from_dict,
    model_to_dict,
    percentile_interval,
)
from orthoforest.nuisance import LearnerSpec, fit_nuisance_pair
from orthoforest.synthetic import ConfoundingSpec, DGPSpec, ThetaSpec, generate, score
from orthoforest.tree import ForestConfig, GradientTree, TreeNode


def _single_leaf_tree(members, first=()):
    split = IndexSplit(np.asarray(first, dtype=np.int64), np.asarray(members, dtype=np.int64))
    return GradientTree(TreeNode(leaf_id=0), {0: np.asarray(members, dtype=np.int64)}, split)


class TestForestWeights:
    def test_single_tree(self):
        forest = KernelForest([_single_leaf_tree([0, 2, 4, 6, 8])], np.arange(10), ForestConfig(n_trees=1))
        w = forest_weights(forest, np.array([0.0]), np.arange(10))
        np.testing.assert_allclose(w, [0.2, 0, 0.2, 0, 0.2, 0, 0.2, 0, 0.2, 0])

    def test_identical_trees(self):
        tree = _single_leaf_tree([0, 2, 4, 6, 8])
        one = forest_weights(KernelForest([tree], np.arange(10), ForestConfig(n_trees=1)), np.zeros(1), np.arange(10))
        two = forest_weights(KernelForest([tree, tree], np.arange(10), ForestConfig(n_trees=2)), np.zeros(1), np.arange(10))
        np.testing.assert_allclose(one, two)

    def test_average_over_trees(self):
        trees = [_single_leaf_tree([0, 1]), _single_leaf_tree([0, 2, 3, 4])]
        w = forest_weights(KernelForest(trees, np.arange(5), ForestConfig(n_trees=2)), np.zeros(1), np.arange(5))
        np.testing.assert_allclose(w, [0.375, 0.25, 0.125, 0.125, 0.125])

    def test_aligned_with_unsorted_over(self):
        forest = KernelForest([_single_leaf_tree([3, 7])], np.array([3, 7, 9]), ForestConfig(n_trees=1))
        w = forest_weights(forest, np.zeros(1), np.array([9, 7, 3]))
        np.testing.assert_allclose(w, [0.0, 0.5, 0.5])

    def test_fitted_forest_weights_sum_to_one(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        model = fit_orf(ds, fast_forest, lasso_learner)
        for x in (-0.8, 0.0, 0.5):
            w1 = forest_weights(model.forest1, np.array([x]), model.halves.first)
            w2 = forest_weights(model.forest2, np.array([x]), model.halves.second)
            assert w1.sum() == pytest.approx(1.0)
            assert w2.sum() == pytest.approx(1.0)
            assert np.all(w1 >= 0)

    def test_wrong_tree_count(self):
        with pytest.raises(SizeError):
            KernelForest([], np.arange(3), ForestConfig(n_trees=2))


class TestKernelRegression:
    def test_example(self):
        assert kernel_regression(np.ones(2), np.array([2.0, 4.0]), np.array([1.0, 2.0])) == pytest.approx(2.0)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(0)
        a, y, t = rng.uniform(size=30), rng.normal(size=30), rng.normal(size=30)
        assert kernel_regression(7.0 * a, y, t) == pytest.approx(kernel_regression(a, y, t))

    def test_matches_weighted_least_squares(self):
        rng = np.random.default_rng(1)
        a, y, t = rng.uniform(size=40), rng.normal(size=40), rng.normal(size=40)
        root = np.sqrt(a)
        expected = np.linalg.lstsq((root * t)[:, None], root * y, rcond=None)[0][0]
        assert kernel_regression(a, y, t) == pytest.approx(expected)

    def test_no_variation(self):
        with pytest.raises(NoTreatmentVariationError):
            kernel_regression(np.ones(3), np.ones(3), np.zeros(3))


class TestFitOrf:
    def test_deterministic(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        xs = np.array([[-0.5], [0.0], [0.5]])
        a = estimate_effects(fit_orf(ds, fast_forest, lasso_learner), xs)
        b = estimate_effects(fit_orf(ds, fast_forest, lasso_learner), xs)
        assert [e.theta for e in a] == [e.theta for e in b]

    def test_thread_count_does_not_change_estimates(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        xs = np.array([[-0.5], [0.5]])
        serial = estimate_effects(fit_orf(ds, fast_forest, lasso_learner, threads=1), xs, threads=1)
        pooled = estimate_effects(fit_orf(ds, fast_forest, lasso_learner, threads=2), xs, threads=2)
        assert [e.theta for e in serial] == [e.theta for e in pooled]

    def test_single_unsplit_tree_is_global_regression(self, small_dgp, lasso_learner):
        ds, _ = small_dgp
        cfg = ForestConfig(n_trees=1, subsample_size=ds.n // 2, max_splits=0, min_leaf_size=5,
                           node_learner=lasso_learner)
        model = fit_orf(ds, cfg, lasso_learner)
        rows1 = model.forest1.trees[0].leaves[0]
        rows2 = model.forest2.trees[0].leaves[0]
        pair = fit_nuisance_pair(ds, rows1, None, lasso_learner, seed=0)
        y_res, t_res = pair.residualize(ds, rows2)
        expected = float(t_res @ y_res) / float(t_res @ t_res)
        est = estimate_effect(model, np.array([0.3]))
        assert est.theta == pytest.approx(expected, rel=1e-6)
        assert est.n_effective == pytest.approx(rows2.size)

    def test_oracle_nuisances(self, small_dgp, fast_forest):
        ds, truth = small_dgp
        oracle = truth.oracle_learner()
        model = fit_orf(ds, dataclasses.replace(fast_forest, node_learner=oracle), oracle)
        x = np.array([0.2])
        a = forest_weights(model.forest2, x, model.halves.second)
        rows = model.halves.second
        F = ds.features()[rows]
        expected = kernel_regression(a, ds.y[rows] - truth.q0(F), ds.t[rows] - truth.g0(F))
        assert estimate_effect(model, x).theta == pytest.approx(expected, rel=1e-10)

    def test_point_dimension(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        model = fit_orf(ds, fast_forest, lasso_learner)
        with pytest.raises(ConfigError, match="d=1"):
            estimate_effect(model, np.array([0.1, 0.2]))

    def test_too_few_rows(self, make_dataset, lasso_learner):
        rng = np.random.default_rng(0)
        ds = make_dataset(rng.normal(size=30), rng.normal(size=30), rng.normal(size=30))
        with pytest.raises(SizeError):
            fit_orf(ds, ForestConfig(n_trees=1, min_leaf_size=10), lasso_learner)

    def test_model_round_trip(self, small_dgp, fast_forest, lasso_learner, tmp_path):
        ds, _ = small_dgp
        model = fit_orf(ds, fast_forest, lasso_learner)
        path = save_json(model_to_dict(model), str(tmp_path / "model.json"))
        again = model_from_dict(load_json(str(path)), ds)
        xs = np.array([[-0.3], [0.4]])
        assert [e.theta for e in estimate_effects(again, xs)] == [e.theta for e in estimate_effects(model, xs)]

    def test_model_refuses_other_data(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        doc = model_to_dict(fit_orf(ds, fast_forest, lasso_learner))
        other, _ = generate(DGPSpec(n=400, d=1, p1=1, p2=3, confounding=ConfoundingSpec(n_support=2), seed=99))
        with pytest.raises(ConfigError, match="different data"):
            model_from_dict(doc, other)

    def test_model_without_forests_is_not_fitted(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        doc = model_to_dict(fit_orf(ds, fast_forest, lasso_learner))
        doc["forest2"] = []
        with pytest.raises(NotFittedError, match="forest2"):
            model_from_dict(doc, ds)

    @pytest.mark.slow
    def test_homogeneous_effect(self):
        ds, _ = generate(DGPSpec(
            n=4000, d=1, p1=0, p2=10, theta=ThetaSpec("constant", value=1.5),
            covariates="uniform", seed=21,
        ))
        cfg = ForestConfig(n_trees=100, min_leaf_size=10, node_learner=LearnerSpec("lasso"))
        est = estimate_effects(fit_orf(ds, cfg, LearnerSpec("lasso"), threads=2), np.linspace(-0.8, 0.8, 5)[:, None])
        assert all(abs(e.theta - 1.5) < 0.15 for e in est)


class TestEffectEstimate:
    def test_interval_must_contain_point(self):
        with pytest.raises(ValueError):
            EffectEstimate((0.0,), 1.0, 1.5, 2.0)

    def test_row(self):
        row = EffectEstimate((0.1,), 1.0, 0.5, 1.5).row()
        assert row == {"x": [0.1], "theta": 1.0, "ci_low": 0.5, "ci_high": 1.5}

    def test_percentile_interval(self):
        assert percentile_interval(np.arange(101.0), 0.9) == (5.0, 95.0)


class TestBootstrap:
    def test_config_errors(self, small_dgp, fast_forest, lasso_learner):
        ds, _ = small_dgp
        xs = np.zeros((1, 1))
        with pytest.raises(ConfigError):
            bootstrap_ci(ds, fast_forest, lasso_learner, xs, n_boot=10, level=0.95, seed=0)
        with pytest.raises(ConfigError):
            bootstrap_ci(ds, fast_forest, lasso_learner, xs, n_boot=20, level=1.0, seed=0)
        with pytest.raises(ConfigError, match="group"):
            bootstrap_ci(ds, fast_forest, lasso_learner, xs, n_boot=20, level=0.95, seed=0, cluster=True)

    def test_noiseless_constant_effect(self, fast_forest):
        ds, _ = generate(DGPSpec(
            n=400, d=1, p1=0, p2=3, theta=ThetaSpec("constant", value=-0.8),
            confounding=ConfoundingSpec(n_support=2), sigma_eps=0.0, covariates="uniform", seed=8,
        ))
        exact = LearnerSpec("lasso", lam=0.0)
        cfg = dataclasses.replace(fast_forest, node_learner=exact)
        est = bootstrap_ci(ds, cfg, exact, np.array([[-0.5], [0.5]]), n_boot=20, level=0.9, seed=1)
        for e in est:
            assert e.theta == pytest.approx(-0.8, abs=1e-4)
            assert e.ci_low <= e.theta <= e.ci_high
            assert e.ci_high - e.ci_low < 0.05
            assert e.replicates.size == 20

    def test_cluster_bootstrap(self, fast_forest, lasso_learner):
        ds, _ = generate(DGPSpec(
            n=400, d=1, p1=0, p2=3, theta=ThetaSpec("constant", value=1.0),
            confounding=ConfoundingSpec(n_support=2), covariates="uniform", n_groups=12, seed=5,
        ))
        est = bootstrap_ci(ds, fast_forest, lasso_learner, np.array([[0.0]]), n_boot=20, level=0.9, seed=2,
                           cluster=True)
        assert len(est) == 1
        assert est[0].ci_low <= est[0].theta <= est[0].ci_high


class TestMonteCarlo:
    @pytest.mark.slow
    def test_forests_are_honest_with_unit_tree_weights(self):
        cfg = ForestConfig(n_trees=50, min_leaf_size=10, max_splits=8, node_learner=LearnerSpec("lasso"))
        single = dataclasses.replace(cfg, n_trees=1)
        for rep in range(50):
            ds, _ = generate(DGPSpec(
                n=1000, d=1, p1=0, p2=5, theta=ThetaSpec("affine", value=0.5, slope=1.0),
                confounding=ConfoundingSpec(n_support=2), covariates="uniform", seed=100 + rep,
            ))
            model = fit_orf(ds, cfg, LearnerSpec("lasso"), seed=rep, threads=4)
            xs = np.random.default_rng(rep).uniform(-1, 1, size=(5, 1))
            for forest, half in ((model.forest1, model.halves.first), (model.forest2, model.halves.second)):
                for tree in forest.trees:
                    assert np.intersect1d(tree.split.first, tree.split.second).size == 0
                    assert tree.is_honest()
                    assert np.isin(tree.split.union, half).all()
                    one = KernelForest([tree], forest.source, single)
                    for x in xs:
                        assert tree.members(x).size > 0
                        assert abs(forest_weights(one, x, half).sum() - 1.0) <= 1e-12

    @pytest.mark.slow
    def test_step_effect_is_recovered(self):
        grid = np.linspace(-1.0, 1.0, 11)[:, None]
        cfg = ForestConfig(n_trees=100, min_leaf_size=10, node_learner=LearnerSpec("lasso"))
        rmse, monotone = [], 0
        for rep in range(20):
            ds, _ = generate(DGPSpec(
                n=4000, d=1, p1=0, p2=10, theta=ThetaSpec("step", low=-1.0, high=1.0),
                confounding=ConfoundingSpec(n_support=3), covariates="uniform", seed=300 + rep,
            ))
            est = estimate_effects(fit_orf(ds, cfg, LearnerSpec("lasso"), seed=rep, threads=4), grid, threads=4)
            rmse.append(score(est, lambda xs: np.sign(xs[:, 0]))["rmse"])
            theta = np.array([e.theta for e in est])
            monotone += theta[grid[:, 0] < 0].max() < theta[grid[:, 0] > 0].min()
        assert np.mean(rmse) <= 0.25
        assert monotone >= 18

    @pytest.mark.slow
    def test_bootstrap_coverage(self):
        points = np.array([[-0.5], [0.0], [0.5]])
        cfg = ForestConfig(n_trees=50, min_leaf_size=10, max_splits=8, node_learner=LearnerSpec("lasso"))
        covered = np.zeros(len(points))
        runs = 200
        for rep in range(runs):
            ds, _ = generate(DGPSpec(
                n=1000, d=1, p1=0, p2=5, theta=ThetaSpec("constant", value=1.5),
                confounding=ConfoundingSpec(n_support=2), covariates="uniform", seed=500 + rep,
            ))
            est = bootstrap_ci(ds, cfg, LearnerSpec("lasso"), points, 100, 0.95, seed=rep, threads=4)
            covered += [e.ci_low <= 1.5 <= e.ci_high for e in est]
        rates = covered / runs
        assert np.all((rates >= 0.90) & (rates <= 0.99)), rates
