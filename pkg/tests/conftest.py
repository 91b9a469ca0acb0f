"""Shared fixtures: small synthetic panels, fast forest settings and the --runslow switch."""

from __future__ import annotations

from typing import Optional

import numpy as np
import pytest

from orthoforest.data import ColumnSpec, Dataset, DatasetSchema
from orthoforest.nuisance import LearnerSpec
from orthoforest.synthetic import ConfoundingSpec, DGPSpec, ThetaSpec, generate
from orthoforest.tree import ForestConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte-Carlo acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="Monte-Carlo check; pass --runslow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def build_dataset(
    y: np.ndarray,
    t: np.ndarray,
    x: np.ndarray,
    wp: Optional[np.ndarray] = None,
    wn: Optional[np.ndarray] = None,
    z: Optional[np.ndarray] = None,
    groups: Optional[np.ndarray] = None,
) -> Dataset:
    n = len(y)
    x = np.reshape(x, (n, -1))
    wp = np.zeros((n, 0)) if wp is None else np.reshape(wp, (n, -1))
    wn = np.zeros((n, 0)) if wn is None else np.reshape(wn, (n, -1))
    z = np.zeros((n, 0)) if z is None else np.reshape(z, (n, -1))
    cols = [ColumnSpec("y", "outcome"), ColumnSpec("t", "treatment")]
    cols += [ColumnSpec(f"x{j}", "target") for j in range(x.shape[1])]
    cols += [ColumnSpec(f"wp{j}", "parametric") for j in range(wp.shape[1])]
    cols += [ColumnSpec(f"wn{j}", "nonparametric") for j in range(wn.shape[1])]
    cols += [ColumnSpec(f"z{j}", "instrument") for j in range(z.shape[1])]
    if groups is not None:
        cols.append(ColumnSpec("group", "group"))
    return Dataset(DatasetSchema(tuple(cols)), y, t, x, wp, wn, z, groups)


@pytest.fixture
def make_dataset():
    """Factory: arrays → Dataset with columns y, t, x*, wp*, wn*, z*."""
    return build_dataset


@pytest.fixture
def small_dgp():
    spec = DGPSpec(
        n=400, d=1, p1=1, p2=3,
        theta=ThetaSpec("constant", value=1.5),
        confounding=ConfoundingSpec(n_support=2),
        covariates="uniform", seed=3,
    )
    return generate(spec)


@pytest.fixture
def fast_forest() -> ForestConfig:
    return ForestConfig(n_trees=4, min_leaf_size=5, max_splits=4, node_learner=LearnerSpec("lasso"), seed=0)


@pytest.fixture
def lasso_learner() -> LearnerSpec:
    return LearnerSpec("lasso")
