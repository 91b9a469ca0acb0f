"""Weighted lasso by cyclic coordinate descent with soft-thresholding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError, WeightError

log = logging.getLogger("orthoforest")


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float
    lam: float
    n_iter: int = 0

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != len(self.coef):
            raise ShapeError(f"expected (n, {len(self.coef)}) features, got {features.shape}")
        return features @ self.coef + self.intercept


def soft_threshold(x: float, t: float) -> float:
    return float(np.sign(x) * max(abs(x) - t, 0.0))


def check_weights(weights: np.ndarray, n: int) -> np.ndarray:
    """Validate sample weights and rescale them to sum to ``n``."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"{w.shape[0]} weights for {n} rows")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise WeightError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise WeightError("weights are all zero")
    return w * (n / total)


def lasso_objective(
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    coef: np.ndarray,
    intercept: float,
    lam: float,
) -> float:
    """Σ wᵢ(yᵢ − β₀ − xᵢ·β)² + λ‖β‖₁ with weights rescaled to sum to n."""
    w = check_weights(weights, len(targets))
    r = np.asarray(targets) - np.asarray(features) @ coef - intercept
    return float(w @ (r * r) + lam * np.abs(coef).sum())


def fit_weighted_lasso(
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    lam: float,
    max_iter: int = 1000,
    tol: float = 1e-8,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> LinearModel:
    """Minimize Σ wᵢ(yᵢ − β₀ − xᵢ·β)² + λ‖β‖₁.

    Weights are rescaled to sum to n first, so multiplying them by a constant does not
    move the solution. Columns are weighted-centered and scaled for the coordinate
    updates; the penalty is applied to the original-scale coefficients and the
    intercept is never penalized.

    Args:
        callback: called after every sweep with (sweep, coef, intercept).
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise ShapeError(f"features must be a matrix, got shape {X.shape}")
    n, p = X.shape
    if y.shape[0] != n:
        raise ShapeError(f"{n} feature rows but {y.shape[0]} targets")
    if lam < 0 or not np.isfinite(lam):
        raise ConfigError(f"lasso penalty must be finite and >= 0, got {lam}")
    w = check_weights(weights, n)

    x_bar = w @ X / n
    y_bar = float(w @ y / n)
    Xc = X - x_bar
    scale = np.sqrt(w @ (Xc * Xc) / n)
    active = np.flatnonzero(scale > 1e-12 * (1.0 + np.abs(x_bar)))
    Z = np.zeros_like(Xc)
    Z[:, active] = Xc[:, active] / scale[active]
    col_sq = w @ (Z * Z)
    thresh = np.zeros(p)
    thresh[active] = lam / (2.0 * scale[active])

    b = np.zeros(p)
    r = y - y_bar
    sweep = 0
    for sweep in range(1, max_iter + 1):
        max_delta = 0.0
        for j in active:
            zj = Z[:, j]
            old = b[j]
            rho = float((w * zj) @ r) + col_sq[j] * old
            new = soft_threshold(rho, thresh[j]) / col_sq[j]
            if new != old:
                r -= zj * (new - old)
                b[j] = new
                max_delta = max(max_delta, abs(new - old) / scale[j])
        if callback is not None:
            coef = np.zeros(p)
            coef[active] = b[active] / scale[active]
            callback(sweep, coef, y_bar - float(x_bar @ coef))
        if max_delta < tol:
            break
    else:
        log.debug("lasso hit the iteration cap (%d sweeps, lam=%g)", max_iter, lam)

    coef = np.zeros(p)
    coef[active] = b[active] / scale[active]
    return LinearModel(coef=coef, intercept=y_bar - float(x_bar @ coef), lam=float(lam), n_iter=sweep)
