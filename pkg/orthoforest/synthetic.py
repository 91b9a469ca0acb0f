"""Synthetic partially-linear data with known effect and nuisance functions.

    T = g₀(X, W) + π·Z + κ·U + η
    Y = θ₀(X)·T + f₀(X, W) + λ·U + ε (+ a group shift when n_groups is set)

W is the concatenation ``[wp | wn]``. g₀ and f₀ are sparse linear in W and
linear in the first target feature, optionally plus a nonlinear term in the first
nonparametric covariate. U is a hidden confounder; Z an instrument.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import ColumnSpec, Dataset, DatasetSchema
from .errors import ConfigError
from .nuisance import LearnerSpec
from .rng import make_rng

log = logging.getLogger("orthoforest")

THETA_KINDS = ("constant", "affine", "step", "sin")
NONLINEAR = ("none", "sin", "square")


@dataclass(frozen=True)
class ThetaSpec:
    """θ₀ as a function of the first target feature."""

    kind: str = "constant"
    value: float = 1.0
    slope: float = 0.0
    low: float = -1.0
    high: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in THETA_KINDS:
            raise ConfigError(f"unknown theta kind '{self.kind}' (expected one of {THETA_KINDS})")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x0 = np.array(x, dtype=np.float64, ndmin=2)[:, 0]
        if self.kind == "constant":
            return np.full(len(x0), self.value)
        if self.kind == "affine":
            return self.value + self.slope * x0
        if self.kind == "step":
            return np.where(x0 > 0, self.high, self.low)
        return self.value + self.amplitude * np.sin(np.pi * x0)


@dataclass(frozen=True)
class ConfoundingSpec:
    n_support: int = 3
    support: Optional[Tuple[int, ...]] = None
    coef_scale: float = 1.0
    x_treatment: float = 0.0
    x_outcome: float = 0.0
    nonlinear: str = "none"
    nonlinear_scale: float = 1.0

    def __post_init__(self):
        if self.nonlinear not in NONLINEAR:
            raise ConfigError(f"unknown nonlinear term '{self.nonlinear}' (expected one of {NONLINEAR})")
        if self.n_support < 0:
            raise ConfigError("confounding.n_support must be >= 0")


@dataclass(frozen=True)
class DGPSpec:
    n: int = 1000
    d: int = 1
    p1: int = 0
    p2: int = 10
    theta: ThetaSpec = field(default_factory=ThetaSpec)
    confounding: ConfoundingSpec = field(default_factory=ConfoundingSpec)
    sigma_eps: float = 1.0
    sigma_eta: float = 1.0
    covariates: str = "normal"
    n_instruments: int = 0
    instrument_strength: float = 0.0
    hidden_treatment: float = 0.0
    hidden_outcome: float = 0.0
    n_groups: Optional[int] = None
    group_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.d < 1 or self.p1 < 0 or self.p2 < 0:
            raise ConfigError(f"invalid DGP dimensions n={self.n} d={self.d} p1={self.p1} p2={self.p2}")
        if self.sigma_eps < 0 or self.sigma_eta < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.covariates not in ("normal", "uniform"):
            raise ConfigError(f"covariates must be 'normal' or 'uniform', got '{self.covariates}'")
        width = self.p1 + self.p2
        support = self.confounding.support
        if support is not None and any(not 0 <= j < width for j in support):
            raise ConfigError(f"confounding support {support} outside the {width} covariates")
        if support is None and self.confounding.n_support > width:
            raise ConfigError(f"confounding.n_support={self.confounding.n_support} exceeds {width} covariates")
        if self.confounding.nonlinear != "none" and self.p2 == 0:
            raise ConfigError("a nonlinear confounding term needs p2 >= 1")
        if self.n_instruments < 0 or (self.instrument_strength != 0 and self.n_instruments == 0):
            raise ConfigError("instrument_strength needs n_instruments >= 1")
        if self.n_groups is not None and self.n_groups < 1:
            raise ConfigError("n_groups must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    """Exact θ₀, g₀, f₀ and q₀ for data drawn from a :class:`DGPSpec`.

    The nuisance functions take the canonical feature matrix ``[x | wp | wn]``.
    """

    spec: DGPSpec
    support: np.ndarray
    treatment_coef: np.ndarray
    outcome_coef: np.ndarray

    def theta(self, x: np.ndarray) -> np.ndarray:
        return self.spec.theta(x)

    def _nonlinear(self, F: np.ndarray) -> np.ndarray:
        c = self.spec.confounding
        if c.nonlinear == "none":
            return np.zeros(len(F))
        wn0 = F[:, self.spec.d + self.spec.p1]
        term = np.sin(wn0) if c.nonlinear == "sin" else wn0 * wn0 - 1.0
        return c.nonlinear_scale * term

    def g0(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=np.float64)
        W = F[:, self.spec.d:]
        return (W[:, self.support] @ self.treatment_coef
                + self.spec.confounding.x_treatment * F[:, 0] + self._nonlinear(F))

    def f0(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=np.float64)
        W = F[:, self.spec.d:]
        return (W[:, self.support] @ self.outcome_coef
                + self.spec.confounding.x_outcome * F[:, 0] + self._nonlinear(F))

    def q0(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=np.float64)
        return self.theta(F[:, :self.spec.d]) * self.g0(F) + self.f0(F)

    def r0(self, features: np.ndarray) -> np.ndarray:
        return np.zeros(len(features))

    @property
    def analytic_dml_bias(self) -> float:
        """Limit of DML minus θ₀ for constant θ₀ when a hidden U drives both T and Y."""
        s = self.spec
        denom = s.instrument_strength ** 2 + s.hidden_treatment ** 2 + s.sigma_eta ** 2
        return 0.0 if denom == 0 else s.hidden_treatment * s.hidden_outcome / denom

    def oracle_learner(self) -> LearnerSpec:
        return LearnerSpec(kind="oracle", oracle={"outcome": self.q0, "treatment": self.g0, "instrument": self.r0})


def dgp_schema(spec: DGPSpec) -> DatasetSchema:
    cols: List[ColumnSpec] = [ColumnSpec("y", "outcome"), ColumnSpec("t", "treatment")]
    cols += [ColumnSpec(f"x{j}", "target") for j in range(spec.d)]
    cols += [ColumnSpec(f"wp{j}", "parametric") for j in range(spec.p1)]
    cols += [ColumnSpec(f"wn{j}", "nonparametric") for j in range(spec.p2)]
    cols += [ColumnSpec(f"z{j}", "instrument") for j in range(spec.n_instruments)]
    if spec.n_groups is not None:
        cols.append(ColumnSpec("group", "group"))
    return DatasetSchema(tuple(cols))


def _draw(rng: np.random.Generator, kind: str, shape: Tuple[int, ...]) -> np.ndarray:
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    return rng.standard_normal(shape)


def generate(spec: DGPSpec) -> Tuple[Dataset, GroundTruth]:
    """Draw a dataset from ``spec``; identical specs give identical data."""
    n, width = spec.n, spec.p1 + spec.p2
    c = spec.confounding
    support = np.asarray(c.support if c.support is not None else range(c.n_support), dtype=np.int64)
    coef_rng = make_rng(spec.seed, "dgp", "coef")
    truth = GroundTruth(
        spec, support,
        treatment_coef=c.coef_scale * coef_rng.uniform(-1.0, 1.0, size=support.size),
        outcome_coef=c.coef_scale * coef_rng.uniform(-1.0, 1.0, size=support.size),
    )

    rng = make_rng(spec.seed, "dgp", "draw")
    x = _draw(rng, spec.covariates, (n, spec.d))
    W = _draw(rng, spec.covariates, (n, width))
    z = rng.standard_normal((n, spec.n_instruments))
    u = rng.standard_normal(n)
    eta = spec.sigma_eta * rng.standard_normal(n)
    eps = spec.sigma_eps * rng.standard_normal(n)

    F = np.hstack([x, W])
    t = truth.g0(F) + spec.hidden_treatment * u + eta
    if spec.n_instruments:
        t = t + spec.instrument_strength * z[:, 0]
    y = truth.theta(x) * t + truth.f0(F) + spec.hidden_outcome * u + eps

    groups = None
    if spec.n_groups is not None:
        labels = rng.integers(0, spec.n_groups, size=n)
        shift = spec.group_scale * rng.standard_normal(spec.n_groups)
        y = y + shift[labels]
        groups = np.array([f"g{g}" for g in labels], dtype=object)

    ds = Dataset(
        dgp_schema(spec), y=y, t=t, x=x,
        wp=W[:, :spec.p1], wn=W[:, spec.p1:], z=z, groups=groups,
    )
    log.debug("generated n=%d d=%d p1=%d p2=%d (theta %s)", n, spec.d, spec.p1, spec.p2, spec.theta.kind)
    return ds, truth


def score(estimates: Sequence, truth) -> Dict[str, float]:
    """RMSE, bias and interval coverage of effect estimates against θ₀.

    ``truth`` is either a :class:`GroundTruth` or any callable mapping points to θ₀.
    """
    if not estimates:
        raise ConfigError("score needs at least one estimate")
    fn = truth.theta if isinstance(truth, GroundTruth) else truth
    xs = np.array([e.x for e in estimates], dtype=np.float64)
    target = np.asarray(fn(xs), dtype=np.float64).reshape(-1)
    err = np.array([e.theta for e in estimates]) - target
    with_ci = [(e, t0) for e, t0 in zip(estimates, target) if e.ci_low is not None and e.ci_high is not None]
    coverage = (
        float(np.mean([e.ci_low <= t0 <= e.ci_high for e, t0 in with_ci])) if with_ci else float("nan")
    )
    return {"rmse": float(np.sqrt(np.mean(err * err))), "bias": float(np.mean(err)), "coverage": coverage}


def dgp_from_dict(doc: Dict[str, object], where: str = "dgp") -> DGPSpec:
    """Build a DGPSpec from a config mapping with nested ``theta`` and ``confounding``."""
    doc = dict(doc or {})
    theta = dict(doc.pop("theta", None) or {})
    confounding = dict(doc.pop("confounding", None) or {})
    if confounding.get("support") is not None:
        confounding["support"] = tuple(int(j) for j in confounding["support"])
    try:
        return DGPSpec(theta=ThetaSpec(**theta), confounding=ConfoundingSpec(**confounding), **doc)
    except (TypeError, ConfigError) as e:
        raise ConfigError(f"{where}: {e}") from e
