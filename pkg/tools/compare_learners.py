"""Diagnostic: nuisance-learner R² on a nonlinear confounding design at several sample sizes.

Y and T depend linearly on the parametric covariates and through sin(2·w) on
the nonparametric ones, which is the case the semi-parametric network targets.
Learner settings come from the comparison section of config.yaml.

    python tools/compare_learners.py
"""
import logging
import sys

sys.path.insert(0, '.')
logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')

import numpy as np

from orthoforest.artifacts import save_table
from orthoforest.config import load_config
from orthoforest.data import ColumnSpec, Dataset, DatasetSchema
from orthoforest.nuisance import LearnerSpec, compare_learners
from orthoforest.rng import make_rng

SIZES = (500, 2000, 5000)
P1, P2 = 3, 5

cfg = load_config()
specs = {name: LearnerSpec.from_dict(doc, f'comparison.learners.{name}')
         for name, doc in cfg.comparison.learners.items()}

schema = DatasetSchema(tuple(
    [ColumnSpec('y', 'outcome'), ColumnSpec('t', 'treatment'), ColumnSpec('x0', 'target')]
    + [ColumnSpec(f'wp{j}', 'parametric') for j in range(P1)]
    + [ColumnSpec(f'wn{j}', 'nonparametric') for j in range(P2)]
))

rows = []
for n in SIZES:
    rng = make_rng(cfg.seed, 'compare_learners_tool', n)
    x = rng.uniform(-1, 1, size=(n, 1))
    wp = rng.normal(size=(n, P1))
    wn = rng.normal(size=(n, P2))
    t = wp @ np.linspace(0.5, -0.5, P1) + 2.0 * np.sin(2.0 * wn[:, 0]) + 0.3 * rng.normal(size=n)
    y = wp @ np.linspace(-1.0, 1.0, P1) + 2.0 * np.sin(2.0 * wn[:, 1]) + 0.5 * t + 0.3 * rng.normal(size=n)
    dataset = Dataset(schema, y, t, x, wp, wn, np.zeros((n, 0)))

    print(f'\n=== n={n} ===')
    for row in compare_learners(dataset, specs, cfg.comparison.train_fraction, cfg.seed):
        print(f'  {row["learner"]:8s} {row["equation"]:9s} R2 in={row["r2_in"]:.3f} '
              f'out={row["r2_out"]:.3f}  ({row["seconds"]:.1f}s)')
        rows.append({'n': n, **row})

path = save_table(rows, f'{cfg.output.dir}/compare_learners.csv')
print(f'\nwrote {path}')
