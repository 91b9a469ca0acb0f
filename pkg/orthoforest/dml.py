"""Cross-fitted average-effect estimators (partialling-out DML and its IV variant).

Both estimators share one cross-fitting pass: nuisances are fitted on the
complement of each fold and evaluated on the fold. The score is linear in θ,
ψ = ψ_a·θ + ψ_b, so θ̂ solves mean(ψ) = 0 in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .data import Dataset
from .errors import (
    ConfigError,
    NoTreatmentVariationError,
    RankError,
    ShapeError,
    SizeError,
    WeakInstrumentError,
)
from .nuisance import LearnerSpec, fit_learner, fit_nuisance_pair
from .rng import derive_seed, make_rng
from .tree import VARIATION_TOL

log = logging.getLogger("orthoforest")

WEAK_TOL = 1e-10


@dataclass(frozen=True)
class CrossFitPlan:
    folds: np.ndarray
    k: int
    seed: int

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"cross-fitting needs at least 2 folds, got {self.k}")
        counts = np.bincount(self.folds, minlength=self.k)
        if len(counts) != self.k or counts.min() == 0:
            raise ConfigError("fold labels must cover 0..k-1")
        if counts.max() - counts.min() > 1:
            raise ConfigError("fold sizes differ by more than one")

    @classmethod
    def make(cls, n: int, k: int, seed: int) -> "CrossFitPlan":
        if k < 2 or k > n:
            raise ConfigError(f"cannot cut {n} rows into {k} folds")
        folds = np.empty(n, dtype=np.int64)
        folds[make_rng(seed, "crossfit").permutation(n)] = np.arange(n) % k
        return cls(folds, k, seed)

    @property
    def n(self) -> int:
        return len(self.folds)

    def fold(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """(train, test) row indices for fold ``j``."""
        return np.flatnonzero(self.folds != j), np.flatnonzero(self.folds == j)


@dataclass(frozen=True)
class AteEstimate:
    theta: float
    std_error: float
    ci_low: float
    ci_high: float
    level: float
    n: int
    estimator: str = "dml"
    f_stat: Optional[float] = None
    folds: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError(f"standard error must be >= 0, got {self.std_error}")

    def to_dict(self) -> Dict[str, object]:
        return {
            "estimator": self.estimator,
            "theta": self.theta,
            "std_error": self.std_error,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "n": self.n,
            "f_stat": self.f_stat,
            "folds": self.folds,
        }

    def summary(self) -> str:
        f = "" if self.f_stat is None else f", first-stage F={self.f_stat:.2f}"
        return (
            f"{self.estimator}: theta={self.theta:.4f} (se {self.std_error:.4f}, "
            f"{self.level:.0%} CI [{self.ci_low:.4f}, {self.ci_high:.4f}], n={self.n}{f})"
        )


def select_window(dataset: Dataset, window: Optional[Sequence[float]]) -> Dataset:
    """Rows whose first target feature lies in the closed interval ``window``."""
    if window is None:
        return dataset
    lo, hi = float(window[0]), float(window[1])
    if lo > hi:
        raise ConfigError(f"dml.x_window [{lo}, {hi}] is empty")
    rows = np.flatnonzero((dataset.x[:, 0] >= lo) & (dataset.x[:, 0] <= hi))
    if rows.size == 0:
        raise SizeError(f"no rows with x in [{lo}, {hi}]")
    return dataset.take(rows)


# ── Cross-fitting ────────────────────────────────────────────

def _fit_fold(
    dataset: Dataset, plan: CrossFitPlan, j: int, spec: LearnerSpec, instruments: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    train, test = plan.fold(j)
    seed = derive_seed(plan.seed, "fold", j)
    pair = fit_nuisance_pair(dataset, train, None, spec, seed)
    y_res, t_res = pair.residualize(dataset, test)
    F = dataset.features()
    dims = (dataset.dims.d, dataset.dims.p1, dataset.dims.p2)
    z_res = np.zeros((test.size, len(instruments)))
    for c, col in enumerate(instruments):
        r = fit_learner(spec, F[train], dataset.z[train, col], np.ones(train.size), dims, seed, "instrument")
        z_res[:, c] = dataset.z[test, col] - r.predict(F[test])
    return test, y_res, t_res, z_res


def cross_fit_residuals(
    dataset: Dataset,
    spec: LearnerSpec,
    plan: CrossFitPlan,
    instruments: Sequence[int] = (),
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[Dict[str, float]]]:
    """Out-of-fold (Ỹ, T̃, Z̃) for every row, plus per-fold residual diagnostics."""
    if plan.n != dataset.n:
        raise ShapeError(f"cross-fit plan covers {plan.n} rows, dataset has {dataset.n}")
    if plan.k > dataset.n / 10:
        raise ConfigError(f"{plan.k} folds is too many for n={dataset.n} (need k <= n/10)")
    parts = Parallel(n_jobs=threads, max_nbytes=None)(
        delayed(_fit_fold)(dataset, plan, j, spec, instruments) for j in range(plan.k)
    )
    y_res = np.empty(dataset.n)
    t_res = np.empty(dataset.n)
    z_res = np.empty((dataset.n, len(instruments)))
    diagnostics: List[Dict[str, float]] = []
    for j, (test, yr, tr, zr) in enumerate(parts):
        y_res[test], t_res[test], z_res[test] = yr, tr, zr
        diagnostics.append({
            "fold": j, "n": int(test.size),
            "y_res_mse": float(np.mean(yr * yr)), "t_res_mse": float(np.mean(tr * tr)),
        })
        log.info("fold %d/%d fitted (n=%d)", j + 1, plan.k, test.size)
    return y_res, t_res, z_res, diagnostics


# ── Estimators on residuals ──────────────────────────────────

def _normal_ci(theta: float, se: float, level: float) -> Tuple[float, float]:
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    return theta - z * se, theta + z * se


def dml_from_residuals(y_res: np.ndarray, t_res: np.ndarray, level: float = 0.95) -> AteEstimate:
    """θ̂ = ΣT̃Ỹ / ΣT̃² with the heteroskedasticity-robust sandwich standard error."""
    y_res = np.asarray(y_res, dtype=np.float64)
    t_res = np.asarray(t_res, dtype=np.float64)
    sxx = float(t_res @ t_res)
    if sxx <= VARIATION_TOL:
        raise NoTreatmentVariationError(f"treatment residuals carry no variation (sum of squares {sxx:.3g})")
    theta = float(t_res @ y_res) / sxx
    psi = (y_res - theta * t_res) * t_res
    se = float(np.sqrt(psi @ psi)) / sxx
    lo, hi = _normal_ci(theta, se, level)
    return AteEstimate(theta, se, lo, hi, level, len(y_res), "dml")


def dmliv_from_residuals(
    y_res: np.ndarray, t_res: np.ndarray, z_res: np.ndarray, level: float = 0.95
) -> AteEstimate:
    """θ̂ = ΣỸZ̃ / ΣT̃Z̃; standard error sqrt(ΣZ̃²ε̂²) / |ΣT̃Z̃| with ε̂ = Ỹ − θ̂T̃."""
    y_res = np.asarray(y_res, dtype=np.float64)
    t_res = np.asarray(t_res, dtype=np.float64)
    z_res = np.asarray(z_res, dtype=np.float64)
    stz = float(t_res @ z_res)
    scale = float(np.sqrt((t_res @ t_res) * (z_res @ z_res)))
    if abs(stz) <= WEAK_TOL * scale or scale == 0:
        raise WeakInstrumentError(f"instrument residuals are (nearly) orthogonal to the treatment ({stz:.3g})")
    theta = float(y_res @ z_res) / stz
    eps = y_res - theta * t_res
    se = float(np.sqrt((z_res * z_res) @ (eps * eps))) / abs(stz)
    lo, hi = _normal_ci(theta, se, level)
    return AteEstimate(theta, se, lo, hi, level, len(y_res), "dmliv")


# ── Public estimators ────────────────────────────────────────

def fit_dml(
    dataset: Dataset, spec: LearnerSpec, plan: CrossFitPlan, level: float = 0.95, threads: int = 1
) -> AteEstimate:
    y_res, t_res, _, diagnostics = cross_fit_residuals(dataset, spec, plan, (), threads)
    est = dml_from_residuals(y_res, t_res, level)
    log.info("%s", est.summary())
    return AteEstimate(**{**est.__dict__, "folds": diagnostics})


def fit_dmliv(
    dataset: Dataset,
    spec: LearnerSpec,
    plan: CrossFitPlan,
    instruments: Sequence[int] = (0,),
    project_instruments: bool = False,
    level: float = 0.95,
    threads: int = 1,
) -> AteEstimate:
    """IV ratio estimator on cross-fitted residuals.

    With ``project_instruments`` several instrument columns are combined into one by
    projecting T̃ on their residuals; otherwise exactly one column is required.
    """
    instruments = list(instruments)
    if not instruments:
        raise ConfigError("dmliv needs an instrument column")
    if len(instruments) > 1 and not project_instruments:
        raise ConfigError(f"{len(instruments)} instruments given; set dml.project_instruments to combine them")
    for col in instruments:
        if not 0 <= col < dataset.dims.q:
            raise ConfigError(f"instrument index {col} out of range for q={dataset.dims.q}")

    y_res, t_res, z_mat, diagnostics = cross_fit_residuals(dataset, spec, plan, instruments, threads)
    if z_mat.shape[1] == 1:
        z_res = z_mat[:, 0]
    else:
        coef, _, rank, _ = np.linalg.lstsq(z_mat, t_res, rcond=None)
        if rank < z_mat.shape[1]:
            raise RankError("instrument residuals are collinear")
        z_res = z_mat @ coef
    est = dmliv_from_residuals(y_res, t_res, z_res, level)
    f_stat = first_stage_f(dataset, instruments)
    if f_stat < 10:
        log.warning("first-stage F=%.2f is below 10; the instrument may be weak", f_stat)
    est = AteEstimate(**{**est.__dict__, "f_stat": f_stat, "folds": diagnostics})
    log.info("%s", est.summary())
    return est


# ── Least squares and the first-stage test ───────────────────

def weighted_least_squares(
    design: np.ndarray, y: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Coefficients, classical standard errors and weighted RSS of y on ``design``.

    The design is used as given (add a constant column for an intercept).
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, k = X.shape
    if len(y) != n:
        raise ShapeError(f"design has {n} rows, y has {len(y)}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if n <= k:
        raise SizeError(f"{n} rows cannot identify {k} coefficients with residual degrees of freedom")
    sw = np.sqrt(w)
    Xw, yw = X * sw[:, None], y * sw
    if np.linalg.matrix_rank(Xw) < k:
        raise RankError(f"design matrix is rank deficient ({k} columns)")
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    rss = float(resid @ resid)
    cov = rss / (n - k) * np.linalg.inv(Xw.T @ Xw)
    return coef, np.sqrt(np.clip(np.diag(cov), 0.0, None)), rss


def first_stage_test(
    dataset: Dataset,
    instruments: Sequence[int],
    controls: Optional[np.ndarray] = None,
) -> Tuple[float, float, int, int]:
    """Joint F-test of the instruments in the regression of T on (1, Z, controls).

    Controls default to the canonical nuisance features. Returns (F, p-value, df1, df2);
    a perfect first stage gives F = inf and p = 0.
    """
    instruments = list(instruments)
    if not instruments:
        raise ConfigError("first-stage test needs at least one instrument")
    C = dataset.features() if controls is None else np.asarray(controls, dtype=np.float64)
    ones = np.ones((dataset.n, 1))
    restricted = np.hstack([ones, C])
    unrestricted = np.hstack([ones, dataset.z[:, instruments], C])
    q = len(instruments)
    df2 = dataset.n - unrestricted.shape[1]
    _, _, rss_u = weighted_least_squares(unrestricted, dataset.t)
    _, _, rss_r = weighted_least_squares(restricted, dataset.t)
    if rss_u <= 1e-24 * max(rss_r, 1.0):
        return float("inf"), 0.0, q, df2
    f = ((rss_r - rss_u) / q) / (rss_u / df2)
    return float(f), float(stats.f.sf(f, q, df2)), q, df2


def first_stage_f(dataset: Dataset, instruments: Sequence[int], controls: Optional[np.ndarray] = None) -> float:
    return first_stage_test(dataset, instruments, controls)[0]
