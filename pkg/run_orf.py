"""Orthogonal random forest toolkit: command-line entry point.

Usage
=====
    python run_orf.py generate  -c config.yaml      # synthetic CSV + schema into output.dir
    python run_orf.py fit       -c config.yaml      # grow both forests, write model.json
    python run_orf.py effects   -c config.yaml      # theta(x) at the configured test points
    python run_orf.py bootstrap -c config.yaml      # add percentile intervals
    python run_orf.py dml       -c config.yaml      # cross-fitted average effect
    python run_orf.py dmliv     -c config.yaml      # IV variant + first-stage F
    python run_orf.py policy    -c config.yaml      # revenue-maximizing price per window
    python run_orf.py plot-data -c config.yaml      # plot.csv + plot.svg
    python run_orf.py benchmark -c config.yaml      # estimator scores on DGP scenarios
    python run_orf.py learners  -c config.yaml      # nuisance learner comparison table

    python run_orf.py effects --set forest.n_trees=100 --set seed=7 --threads 4
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from orthoforest.cli import main

if __name__ == "__main__":
    sys.exit(main())
