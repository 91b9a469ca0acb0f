"""Score estimators against known θ₀ on synthetic scenarios."""

from __future__ import annotations

import dataclasses
import logging
import time
from typing import Dict, List, Sequence

import numpy as np

from .dml import CrossFitPlan, fit_dml, fit_dmliv
from .errors import ConfigError
from .forest import EffectEstimate, bootstrap_ci, estimate_effects, fit_orf
from .nuisance import LearnerSpec
from .rng import derive_seed
from .synthetic import DGPSpec, GroundTruth, generate, score
from .tree import ForestConfig

log = logging.getLogger("orthoforest")

ESTIMATORS = ("orf", "oracle", "dml", "dmliv")


def _ate_as_effects(ate, xs: np.ndarray) -> List[EffectEstimate]:
    return [EffectEstimate(tuple(map(float, x)), ate.theta, ate.ci_low, ate.ci_high) for x in xs]


def run_estimator(
    name: str,
    dataset,
    truth: GroundTruth,
    xs: np.ndarray,
    forest: ForestConfig,
    final_learner: LearnerSpec,
    seed: int,
    n_boot: int = 0,
    level: float = 0.95,
    folds: int = 2,
    threads: int = 1,
) -> List[EffectEstimate]:
    """Effect estimates of one named estimator at ``xs``.

    ``oracle`` is the ORF with the true nuisances plugged in at both stages; ``dml``
    and ``dmliv`` report their single average effect at every point.
    """
    if name in ("orf", "oracle"):
        if name == "oracle":
            forest = dataclasses.replace(forest, node_learner=truth.oracle_learner())
            final_learner = truth.oracle_learner()
        if n_boot:
            return bootstrap_ci(dataset, forest, final_learner, xs, n_boot, level, seed, threads)
        return estimate_effects(fit_orf(dataset, forest, final_learner, seed, threads), xs, threads)
    plan = CrossFitPlan.make(dataset.n, folds, derive_seed(seed, "plan"))
    if name == "dml":
        return _ate_as_effects(fit_dml(dataset, final_learner, plan, level, threads), xs)
    if name == "dmliv":
        return _ate_as_effects(fit_dmliv(dataset, final_learner, plan, (0,), False, level, threads), xs)
    raise ConfigError(f"unknown estimator '{name}' (expected one of {ESTIMATORS})")


def run_benchmark(
    scenarios: Dict[str, DGPSpec],
    estimators: Sequence[str],
    xs: np.ndarray,
    forest: ForestConfig,
    final_learner: LearnerSpec,
    replicates: int = 1,
    seed: int = 0,
    n_boot: int = 0,
    level: float = 0.95,
    folds: int = 2,
    threads: int = 1,
) -> List[Dict[str, object]]:
    """One row per (scenario, estimator): rmse, bias and coverage pooled over replicates."""
    if replicates < 1:
        raise ConfigError(f"benchmark.replicates must be >= 1, got {replicates}")
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator '{name}' (expected one of {ESTIMATORS})")
    xs = np.array(xs, dtype=np.float64, ndmin=2)
    rows: List[Dict[str, object]] = []
    for scenario, spec in scenarios.items():
        pooled: Dict[str, List[EffectEstimate]] = {e: [] for e in estimators}
        seconds: Dict[str, float] = {e: 0.0 for e in estimators}
        truths: List[GroundTruth] = []
        for r in range(replicates):
            rep_seed = derive_seed(seed, "benchmark", scenario, r)
            dataset, truth = generate(dataclasses.replace(spec, seed=rep_seed))
            truths.append(truth)
            for name in estimators:
                start = time.perf_counter()
                pooled[name] += run_estimator(
                    name, dataset, truth, xs, forest, final_learner,
                    derive_seed(rep_seed, name), n_boot, level, folds, threads,
                )
                seconds[name] += time.perf_counter() - start
        for name in estimators:
            metrics = score(pooled[name], truths[0])
            rows.append({"scenario": scenario, "estimator": name, **metrics, "wall_time": seconds[name]})
            log.info("benchmark %s / %s: rmse %.4f bias %.4f", scenario, name, metrics["rmse"], metrics["bias"])
    return rows
