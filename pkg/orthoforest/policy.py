"""Revenue and revenue-maximizing price over a window of per-day effect estimates.

With Y = β_d·T + (q̂ − β_d·ĝ) on day d, revenue Π(T) = Σ_d T·Y_d is quadratic::

    Π(T) = Σ_d [(q̂ − β_d ĝ)·T + β_d·T²]

and, when Σβ_d < 0, peaks at T* = −Σ_d (q̂ − β_d ĝ) / (2 Σ_d β_d). Prices and
outcomes are in whatever units the caller fitted the effects in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonConcaveError, PolicyError

log = logging.getLogger("orthoforest")

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class PolicyInputs:
    """Per-day slopes β̂_d with outcome/treatment levels q̂, ĝ (scalars or per day)."""

    beta: np.ndarray
    q_hat: np.ndarray
    g_hat: np.ndarray
    bounds: Tuple[float, float]
    days: Optional[np.ndarray] = None
    units: str = "level"

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        if beta.size == 0:
            raise PolicyError("policy window is empty")
        q = np.broadcast_to(np.asarray(self.q_hat, dtype=np.float64), beta.shape).copy()
        g = np.broadcast_to(np.asarray(self.g_hat, dtype=np.float64), beta.shape).copy()
        days = np.arange(beta.size, dtype=np.float64) if self.days is None else np.asarray(self.days, dtype=np.float64)
        if days.shape != beta.shape:
            raise PolicyError(f"{days.size} days for {beta.size} slopes")
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo <= hi:
            raise PolicyError(f"price bounds [{lo}, {hi}] are not ordered")
        for name, arr in (("beta", beta), ("q_hat", q), ("g_hat", g)):
            if not np.all(np.isfinite(arr)):
                raise PolicyError(f"{name} has non-finite entries")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "q_hat", q)
        object.__setattr__(self, "g_hat", g)
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "bounds", (lo, hi))

    @property
    def intercepts(self) -> np.ndarray:
        return self.q_hat - self.beta * self.g_hat

    def window(self, lo: float, hi: float) -> "PolicyInputs":
        keep = (self.days >= lo) & (self.days <= hi)
        if not keep.any():
            raise PolicyError(f"no days in window [{lo}, {hi}]")
        return PolicyInputs(self.beta[keep], self.q_hat[keep], self.g_hat[keep], self.bounds, self.days[keep], self.units)


def revenue(price: float, inputs: PolicyInputs) -> float:
    lo, hi = inputs.bounds
    if not lo <= price <= hi:
        raise PolicyError(f"price {price} outside bounds [{lo}, {hi}]")
    return float(np.sum(inputs.intercepts * price + inputs.beta * price * price))


def optimal_price(inputs: PolicyInputs) -> float:
    """First-order-condition maximizer of :func:`revenue`, clamped to the price bounds."""
    curvature = float(inputs.beta.sum())
    if curvature >= 0:
        raise NonConcaveError(f"sum of slopes {curvature:.4g} >= 0: revenue has no interior maximum")
    t_star = -float(inputs.intercepts.sum()) / (2.0 * curvature)
    lo, hi = inputs.bounds
    if not lo <= t_star <= hi:
        log.warning("optimal price %.4g clamped to [%.4g, %.4g]", t_star, lo, hi)
        t_star = min(max(t_star, lo), hi)
    return t_star


def grid_search_price(inputs: PolicyInputs, step: float) -> float:
    """Best price on the grid lo, lo+step, ..., hi (hi always included)."""
    if step <= 0:
        raise PolicyError(f"grid step must be > 0, got {step}")
    lo, hi = inputs.bounds
    grid = np.append(np.arange(lo, hi, step), hi)
    values = np.array([np.sum(inputs.intercepts * p + inputs.beta * p * p) for p in grid])
    return float(grid[int(np.argmax(values))])


def revenue_curve(inputs: PolicyInputs, points: int = 101) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = inputs.bounds
    prices = np.linspace(lo, hi, points)
    return prices, np.array([revenue(float(p), inputs) for p in prices])


DEFAULT_WINDOWS: Dict[str, Tuple[float, float]] = {
    "whole": (-14.0, 14.0),
    "pre": (-14.0, 0.0),
    "post": (1.0, 14.0),
}


def price_windows(
    inputs: PolicyInputs,
    windows: Optional[Dict[str, Sequence[float]]] = None,
    actual_price: Optional[float] = None,
    grid_step: float = 1e-3,
) -> Dict[str, object]:
    """Optimal price and revenue per window, evaluated independently.

    When ``pre``, ``post`` and ``whole`` windows are all present the result carries
    the two-part gain Π_pre(T*_pre) + Π_post(T*_post) − Π_whole(T*_whole). With an
    ``actual_price`` it also carries the whole-window price and revenue gaps.
    A window whose revenue is not concave falls back to the grid maximizer.
    """
    windows = dict(DEFAULT_WINDOWS if windows is None else windows)
    out: Dict[str, object] = {"windows": {}}
    for name, (lo, hi) in windows.items():
        sub = inputs.window(float(lo), float(hi))
        try:
            t_star, concave = optimal_price(sub), True
        except NonConcaveError:
            log.warning("window '%s' is not concave; using the grid maximizer", name)
            t_star, concave = grid_search_price(sub, grid_step), False
        out["windows"][name] = {
            "lo": float(lo), "hi": float(hi), "days": int(sub.beta.size),
            "t_star": t_star, "revenue": revenue(t_star, sub), "concave": concave,
        }
    w = out["windows"]
    if {"pre", "post", "whole"} <= set(w):
        out["two_part_gain"] = w["pre"]["revenue"] + w["post"]["revenue"] - w["whole"]["revenue"]
    if actual_price is not None:
        key = "whole" if "whole" in w else next(iter(w))
        lo, hi = w[key]["lo"], w[key]["hi"]
        actual_rev = revenue(float(actual_price), inputs.window(lo, hi))
        out["actual"] = {
            "window": key,
            "price": float(actual_price),
            "revenue": actual_rev,
            "price_gap": w[key]["t_star"] - float(actual_price),
            "revenue_gap": w[key]["revenue"] - actual_rev,
        }
    return out


def policy_inputs_from_effects(
    estimates: Sequence,
    q_hat: ArrayLike,
    g_hat: ArrayLike,
    bounds: Tuple[float, float],
    units: str = "level",
) -> PolicyInputs:
    """Per-day slopes from effect estimates whose first coordinate is the day."""
    ordered = sorted(estimates, key=lambda e: e.x[0])
    return PolicyInputs(
        beta=np.array([e.theta for e in ordered]),
        q_hat=np.asarray(q_hat, dtype=np.float64),
        g_hat=np.asarray(g_hat, dtype=np.float64),
        bounds=bounds,
        days=np.array([e.x[0] for e in ordered]),
        units=units,
    )
