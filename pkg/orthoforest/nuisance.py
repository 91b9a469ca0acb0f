"""Nuisance learners for q₀ = E[Y | X, W] and g₀ = E[T | X, W].

Every fitted predictor takes the canonical feature matrix ``[x | wp | wn]`` (see
:meth:`Dataset.features`). Linear learners consume sample weights in closed form;
network learners consume them by resampling rows in proportion to the weights.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .errors import ConfigError, ShapeError, SizeError, WeightError
from .lasso import check_weights, fit_weighted_lasso
from .rng import derive_seed, make_rng
from .sdnn import ACTIVATIONS, SdnnArchitecture, SdnnModel, TrainConfig, train_sdnn

log = logging.getLogger("orthoforest")

LEARNER_KINDS = ("lasso", "mean", "dnn", "sdnn", "oracle")
WEIGHTINGS = ("auto", "weighted", "sampled")

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LearnerSpec:
    """Which learner to fit and how.

    ``weighting="auto"`` means closed-form weights for lasso/mean and resampling for
    the networks. ``oracle`` maps a target name (``outcome``, ``treatment``,
    ``instrument``) to a callable on the canonical feature matrix.
    """

    kind: str = "lasso"
    lam: float = 1e-3
    hidden: Optional[Tuple[int, ...]] = None
    activation: str = "relu"
    sample_factor: float = 1.0
    weighting: str = "auto"
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: Optional[Dict[str, Predictor]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner kind '{self.kind}' (expected one of {LEARNER_KINDS})")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting '{self.weighting}' (expected one of {WEIGHTINGS})")
        if self.lam < 0:
            raise ConfigError(f"learner lam must be >= 0, got {self.lam}")
        if self.sample_factor < 1:
            raise ConfigError(f"sample_factor must be >= 1, got {self.sample_factor}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}' (expected one of {tuple(ACTIVATIONS)})")
        if self.hidden is not None and (not self.hidden or any(h < 1 for h in self.hidden)):
            raise ConfigError(f"hidden widths must be a non-empty list of sizes >= 1, got {list(self.hidden)}")
        if self.kind == "oracle" and not self.oracle:
            raise ConfigError("oracle learner needs callables for its targets")

    def to_dict(self) -> Dict[str, object]:
        if self.kind == "oracle":
            raise ConfigError("oracle learners wrap in-memory functions and cannot be exported")
        return {
            "kind": self.kind,
            "lam": self.lam,
            "hidden": None if self.hidden is None else list(self.hidden),
            "activation": self.activation,
            "sample_factor": self.sample_factor,
            "weighting": self.weighting,
            "train": dataclasses.asdict(self.train),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, object], where: str = "learner") -> "LearnerSpec":
        doc = dict(doc or {})
        train_doc = dict(doc.pop("train", None) or {})
        known = {f.name for f in dataclasses.fields(cls)} - {"train", "oracle"}
        known_train = {f.name for f in dataclasses.fields(TrainConfig)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown key '{where}.{key}'")
        for key in train_doc:
            if key not in known_train:
                raise ConfigError(f"unknown key '{where}.train.{key}'")
        try:
            if doc.get("hidden") is not None:
                doc["hidden"] = tuple(int(h) for h in doc["hidden"])
            return cls(train=TrainConfig(**train_doc), **doc)
        except (TypeError, ValueError, ConfigError) as e:
            raise ConfigError(f"{where}: {e}") from e

    @property
    def sampled(self) -> bool:
        if self.weighting == "auto":
            return self.kind in ("dnn", "sdnn")
        return self.weighting == "sampled"


def default_hidden(width_inputs: int) -> Tuple[int, int]:
    h = max(1, min(100, 4 * width_inputs))
    return (h, h)


# ── Predictors ───────────────────────────────────────────────

def split_features(
    features: np.ndarray, d: int, p1: int, p2: int, dense: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Canonical columns → (nonparametric ``x ∥ wn``, parametric ``wp``)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != d + p1 + p2:
        raise ShapeError(f"expected (n, {d + p1 + p2}) features, got {f.shape}")
    if dense:
        return f, np.zeros((len(f), 0))
    return np.hstack([f[:, :d], f[:, d + p1:]]), f[:, d:d + p1]


@dataclass(frozen=True)
class MeanModel:
    value: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.full(len(features), self.value)


@dataclass(frozen=True)
class FixedPredictor:
    """Wraps a known function; used for oracle nuisances on synthetic data."""

    fn: Predictor

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(features, dtype=np.float64)), dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class SdnnRegressor:
    """Routes ``[x | wp | wn]`` into the two network branches.

    For ``dense=True`` every column goes through the nonlinear branch.
    """

    model: SdnnModel
    d: int
    p1: int
    p2: int
    dense: bool = False

    def split(self, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return split_features(features, self.d, self.p1, self.p2, self.dense)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.model.predict(*self.split(features))


# ── Weighting ────────────────────────────────────────────────

def resample_by_weights(rows: Sequence[int], weights: np.ndarray, factor: float, seed: int) -> np.ndarray:
    """Draw ⌈factor·n⌉ rows i.i.d. with probability proportional to ``weights``."""
    rows = np.asarray(rows)
    n = len(rows)
    if factor < 1:
        raise ConfigError(f"resampling factor must be >= 1, got {factor}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != n:
        raise ShapeError(f"{len(w)} weights for {n} rows")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise WeightError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise WeightError("weights are all zero")
    rng = make_rng(seed, "resample")
    picks = rng.choice(n, size=int(math.ceil(factor * n)), replace=True, p=w / total)
    return rows[picks]


# ── Fitting ──────────────────────────────────────────────────

def fit_learner(
    spec: LearnerSpec,
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    dims: Tuple[int, int, int],
    seed: int,
    target: str = "outcome",
):
    """Fit one nuisance regression and return an object with ``predict(features)``.

    Args:
        dims: (d, p1, p2) so network learners can split the canonical columns.
        target: name used to pick the oracle callable and to derive the seed.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ShapeError(f"features {X.shape} do not match {len(y)} targets")
    w = check_weights(weights, len(y))
    fit_seed = derive_seed(seed, "learner", target)

    if spec.kind == "oracle":
        if target not in spec.oracle:
            raise ConfigError(f"oracle learner has no function for '{target}'")
        return FixedPredictor(spec.oracle[target])

    if spec.sampled:
        picks = resample_by_weights(np.arange(len(y)), w, spec.sample_factor, fit_seed)
        X, y, w = X[picks], y[picks], np.ones(len(picks))

    if spec.kind == "mean":
        return MeanModel(float(w @ y / w.sum()))
    if spec.kind == "lasso":
        return fit_weighted_lasso(X, y, w, spec.lam)

    d, p1, p2 = dims
    dense = spec.kind == "dnn"
    n_nonparametric = d + p1 + p2 if dense else d + p2
    hidden = spec.hidden or default_hidden(n_nonparametric if dense else (p2 or d))
    arch = SdnnArchitecture(n_nonparametric, 0 if dense else p1, tuple(hidden), spec.activation)
    cfg = dataclasses.replace(spec.train, seed=fit_seed)
    model = train_sdnn((split_features(X, d, p1, p2, dense), y), w, arch, cfg)
    return SdnnRegressor(model, d, p1, p2, dense)


@dataclass(frozen=True)
class NuisancePair:
    """Fitted q̂ (outcome) and ĝ (treatment), plus r̂ for an instrument when requested."""

    q: object
    g: object
    r: Optional[object] = None
    instrument: Optional[int] = None

    def residualize(self, dataset: Dataset, indices: Optional[Sequence[int]] = None):
        """Return (Ỹ, T̃) or (Ỹ, T̃, Z̃) over ``indices`` (all rows if omitted)."""
        idx = np.arange(dataset.n) if indices is None else np.asarray(indices, dtype=np.int64)
        F = dataset.features()[idx]
        y_res = dataset.y[idx] - self.q.predict(F)
        t_res = dataset.t[idx] - self.g.predict(F)
        if self.r is None:
            return y_res, t_res
        return y_res, t_res, dataset.z[idx, self.instrument] - self.r.predict(F)


def fit_nuisance_pair(
    dataset: Dataset,
    indices: Sequence[int],
    weights: Optional[np.ndarray],
    spec: LearnerSpec,
    seed: int,
    instrument: Optional[int] = None,
) -> NuisancePair:
    """Fit q̂ on Y and ĝ on T (and r̂ on Z[:, instrument]) over the rows in ``indices``.

    Rows with zero weight carry no information for any learner, so they are dropped
    before fitting.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise SizeError("nuisance fit needs at least one row")
    w = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != idx.size:
        raise ShapeError(f"{w.size} weights for {idx.size} rows")
    w = check_weights(w, idx.size)
    keep = w > 0
    idx, w = idx[keep], w[keep]

    F = dataset.features()[idx]
    dims = (dataset.dims.d, dataset.dims.p1, dataset.dims.p2)
    q = fit_learner(spec, F, dataset.y[idx], w, dims, seed, "outcome")
    g = fit_learner(spec, F, dataset.t[idx], w, dims, seed, "treatment")
    r = None
    if instrument is not None:
        if not 0 <= instrument < dataset.dims.q:
            raise ShapeError(f"instrument index {instrument} out of range for q={dataset.dims.q}")
        r = fit_learner(spec, F, dataset.z[idx, instrument], w, dims, seed, "instrument")
    return NuisancePair(q, g, r, instrument)


# ── Learner comparison ───────────────────────────────────────

def _r2_mse(y: np.ndarray, pred: np.ndarray) -> Tuple[float, float]:
    resid = y - pred
    sse = float(resid @ resid)
    centered = y - y.mean()
    sst = float(centered @ centered)
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    return r2, sse / len(y)


def compare_learners(
    dataset: Dataset,
    specs: Dict[str, LearnerSpec],
    train_fraction: float = 0.8,
    seed: int = 0,
) -> List[Dict[str, object]]:
    """Fit every learner on a random training share and score both equations in and out of sample."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = make_rng(seed, "compare_learners").permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if train.size < 2 or test.size < 2:
        raise SizeError(f"n={dataset.n} too small for a {train_fraction:.0%} split")
    F = dataset.features()
    dims = (dataset.dims.d, dataset.dims.p1, dataset.dims.p2)

    rows: List[Dict[str, object]] = []
    for name, spec in specs.items():
        for equation, target in (("outcome", dataset.y), ("treatment", dataset.t)):
            start = time.perf_counter()
            model = fit_learner(spec, F[train], target[train], np.ones(train.size), dims, seed, equation)
            seconds = time.perf_counter() - start
            r2_in, mse_in = _r2_mse(target[train], model.predict(F[train]))
            r2_out, mse_out = _r2_mse(target[test], model.predict(F[test]))
            log.info("learner %s / %s: R2 in %.3f out %.3f (%.1fs)", name, equation, r2_in, r2_out, seconds)
            rows.append({
                "learner": name, "equation": equation,
                "r2_in": r2_in, "mse_in": mse_in, "r2_out": r2_out, "mse_out": mse_out,
                "seconds": seconds,
            })
    return rows
