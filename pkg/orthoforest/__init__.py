"""Heterogeneous treatment effects with orthogonal random forests and semi-parametric nuisance networks."""

__version__ = "0.1.0"
