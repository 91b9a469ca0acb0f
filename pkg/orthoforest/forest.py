"""Two-forest orthogonal estimator: kernel weights, local nuisances and residual regression.

``fit_orf`` splits the sample into halves D₁ and D₂ and grows one forest on
subsamples of each. For a test point x, forest F₁ weights D₁ to fit local
nuisances q̂, ĝ; forest F₂ weights D₂ for the final residual-on-residual
regression.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .data import Dataset, IndexSplit, split_halves, subsample
from .errors import (
    ConfigError,
    NotFittedError,
    NoTreatmentVariationError,
    OrthoForestError,
    SizeError,
    WeightError,
)
from .nuisance import LearnerSpec, fit_nuisance_pair
from .rng import derive_seed, make_rng
from .tree import VARIATION_TOL, ForestConfig, GradientTree, grow_tree

log = logging.getLogger("orthoforest")

MODEL_FORMAT = 1
MIN_BOOT = 20


@dataclass
class KernelForest:
    trees: List[GradientTree]
    source: np.ndarray
    cfg: ForestConfig

    def __post_init__(self):
        if len(self.trees) != self.cfg.n_trees:
            raise SizeError(f"forest holds {len(self.trees)} trees, config asks for {self.cfg.n_trees}")


@dataclass(frozen=True)
class EffectEstimate:
    x: Tuple[float, ...]
    theta: float
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_effective: float = float("nan")
    replicates: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.theta <= self.ci_high:
                raise ValueError(f"interval [{self.ci_low}, {self.ci_high}] does not contain {self.theta}")

    def row(self) -> Dict[str, Any]:
        return {"x": list(self.x), "theta": self.theta, "ci_low": self.ci_low, "ci_high": self.ci_high}


@dataclass
class OrfModel:
    dataset: Dataset
    halves: IndexSplit
    forest1: KernelForest
    forest2: KernelForest
    final_learner: LearnerSpec
    seed: int


# ── Growing ──────────────────────────────────────────────────

def _build_tree(dataset: Dataset, source: np.ndarray, s: int, cfg: ForestConfig, seed: int) -> GradientTree:
    split = subsample(dataset, s, seed, over=source)
    return grow_tree(dataset, split, cfg, seed)


def grow_forest(
    dataset: Dataset, source: np.ndarray, cfg: ForestConfig, seed: int, threads: int = 1
) -> KernelForest:
    s = cfg.subsample_for(len(source))
    trees = Parallel(n_jobs=threads, max_nbytes=None)(
        delayed(_build_tree)(dataset, source, s, cfg, derive_seed(seed, "tree", b))
        for b in range(cfg.n_trees)
    )
    return KernelForest(list(trees), np.sort(source), cfg)


def fit_orf(
    dataset: Dataset,
    cfg: ForestConfig,
    final_learner: LearnerSpec,
    seed: Optional[int] = None,
    threads: int = 1,
) -> OrfModel:
    seed = cfg.seed if seed is None else seed
    r = cfg.min_leaf_size
    if dataset.n < 4 * r:
        raise SizeError(f"n={dataset.n} is below 4 x min_leaf_size = {4 * r}")
    halves = split_halves(dataset, derive_seed(seed, "orf"))
    forest1 = grow_forest(dataset, halves.first, cfg, derive_seed(seed, "forest", 1), threads)
    forest2 = grow_forest(dataset, halves.second, cfg, derive_seed(seed, "forest", 2), threads)
    log.info(
        "ORF fitted: n=%d, %d trees per forest, mean leaves %.1f / %.1f",
        dataset.n, cfg.n_trees,
        np.mean([t.n_leaves for t in forest1.trees]), np.mean([t.n_leaves for t in forest2.trees]),
    )
    return OrfModel(dataset, halves, forest1, forest2, final_learner, seed)


# ── Weights and estimation ───────────────────────────────────

def forest_weights(forest: KernelForest, x: np.ndarray, over: Sequence[int]) -> np.ndarray:
    """Per tree, 1/|leaf| for the S² rows sharing x's leaf; averaged over all trees.

    The result is aligned with ``over``. A tree whose matched leaf is empty adds
    nothing but still counts in the average.
    """
    if not forest.trees:
        raise SizeError("forest has no trees")
    over = np.asarray(over, dtype=np.int64)
    order = np.argsort(over, kind="stable")
    sorted_over = over[order]
    w = np.zeros(len(over))
    for tree in forest.trees:
        members = tree.members(x)
        if members.size == 0:
            continue
        pos = np.searchsorted(sorted_over, members)
        if np.any(pos >= len(over)) or np.any(sorted_over[np.minimum(pos, len(over) - 1)] != members):
            raise WeightError("leaf members fall outside the requested index set")
        w[order[pos]] += 1.0 / members.size
    return w / len(forest.trees)


def kernel_regression(weights: np.ndarray, y_res: np.ndarray, t_res: np.ndarray) -> float:
    """θ̂ = Σ aᵢT̃ᵢỸᵢ / Σ aᵢT̃ᵢ²."""
    a = np.asarray(weights, dtype=np.float64)
    t_res = np.asarray(t_res, dtype=np.float64)
    denom = float(a @ (t_res * t_res))
    if denom <= VARIATION_TOL:
        raise NoTreatmentVariationError(f"no local treatment variation (weighted sum of squares {denom:.3g})")
    return float(a @ (t_res * np.asarray(y_res, dtype=np.float64))) / denom


def _point_label(x: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in x)


def estimate_effect(model: OrfModel, x: np.ndarray) -> EffectEstimate:
    """Point estimate θ̂(x); ``x`` is in the dataset's stored (post-transform) units."""
    ds = model.dataset
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != ds.dims.d:
        raise ConfigError(f"test point has {x.size} coordinates, the data has d={ds.dims.d}")
    d1, d2 = model.halves

    omega = forest_weights(model.forest1, x, d1)
    if omega.sum() <= 0:
        raise WeightError(f"no D1 rows share a leaf with x=({_point_label(x)})")
    pair = fit_nuisance_pair(ds, d1, omega, model.final_learner, derive_seed(model.seed, "local", _point_label(x)))

    a = forest_weights(model.forest2, x, d2)
    support = np.flatnonzero(a > 0)
    if support.size == 0:
        raise WeightError(f"no D2 rows share a leaf with x=({_point_label(x)})")
    y_res, t_res = pair.residualize(ds, d2[support])
    theta = kernel_regression(a[support], y_res, t_res)
    share = a[support] / a[support].sum()
    return EffectEstimate(tuple(float(v) for v in x), theta, n_effective=float(1.0 / (share @ share)))


def estimate_effects(model: OrfModel, xs: np.ndarray, threads: int = 1) -> List[EffectEstimate]:
    xs = np.array(xs, dtype=np.float64, ndmin=2)
    return list(Parallel(n_jobs=threads, max_nbytes=None)(delayed(estimate_effect)(model, x) for x in xs))


# ── Bootstrap ────────────────────────────────────────────────

def percentile_interval(values: np.ndarray, level: float) -> Tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


def _resample_rows(dataset: Dataset, rng: np.random.Generator, cluster: bool) -> np.ndarray:
    if not cluster:
        return rng.integers(0, dataset.n, size=dataset.n)
    labels, inverse = np.unique(dataset.groups.astype(str), return_inverse=True)
    by_group = [np.flatnonzero(inverse == g) for g in range(len(labels))]
    picks = rng.integers(0, len(labels), size=len(labels))
    return np.concatenate([by_group[g] for g in picks])


def _replicate(
    dataset: Dataset, xs: np.ndarray, cfg: ForestConfig, final_learner: LearnerSpec,
    seed: int, b: int, cluster: bool,
) -> np.ndarray:
    rows = _resample_rows(dataset, make_rng(seed, "bootstrap", b), cluster)
    out = np.full(len(xs), np.nan)
    try:
        model = fit_orf(dataset.take(rows), cfg, final_learner, derive_seed(seed, "bootstrap-fit", b))
    except OrthoForestError as e:
        log.warning("bootstrap replicate %d failed to fit: %s", b, e)
        return out
    for i, x in enumerate(xs):
        try:
            out[i] = estimate_effect(model, x).theta
        except OrthoForestError as e:
            log.warning("bootstrap replicate %d, point %d: %s", b, i, e)
    return out


def bootstrap_ci(
    dataset: Dataset,
    cfg: ForestConfig,
    final_learner: LearnerSpec,
    xs: np.ndarray,
    n_boot: int,
    level: float,
    seed: int,
    threads: int = 1,
    cluster: bool = False,
) -> List[EffectEstimate]:
    """Percentile intervals from ``n_boot`` refits on rows (or groups) drawn with replacement.

    Each interval is centred on the full-sample point estimate in the sense that it is
    widened, with a warning, when the percentiles happen to exclude it.
    """
    if n_boot < MIN_BOOT:
        raise ConfigError(f"bootstrap.n_boot must be >= {MIN_BOOT}, got {n_boot}")
    if not 0 < level < 1:
        raise ConfigError(f"bootstrap.level must be in (0, 1), got {level}")
    if cluster and dataset.groups is None:
        raise ConfigError("bootstrap.cluster needs a column with role 'group'")
    xs = np.array(xs, dtype=np.float64, ndmin=2)

    model = fit_orf(dataset, cfg, final_learner, seed, threads)
    points = estimate_effects(model, xs, threads)
    reps = np.vstack(Parallel(n_jobs=threads, max_nbytes=None)(
        delayed(_replicate)(dataset, xs, cfg, final_learner, seed, b, cluster) for b in range(n_boot)
    ))
    log.info("bootstrap: %d replicates at %d points", n_boot, len(xs))

    out: List[EffectEstimate] = []
    for i, est in enumerate(points):
        values = reps[:, i][np.isfinite(reps[:, i])]
        if values.size < MIN_BOOT:
            raise SizeError(f"only {values.size} usable bootstrap replicates at point {i}")
        lo, hi = percentile_interval(values, level)
        if not lo <= est.theta <= hi:
            log.warning("interval [%.4g, %.4g] at point %d widened to include %.4g", lo, hi, i, est.theta)
            lo, hi = min(lo, est.theta), max(hi, est.theta)
        out.append(EffectEstimate(est.x, est.theta, lo, hi, est.n_effective, values))
    return out


# ── Export ───────────────────────────────────────────────────

def model_to_dict(model: OrfModel) -> Dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "seed": model.seed,
        "data_fingerprint": model.dataset.fingerprint(),
        "forest": model.forest1.cfg.to_dict(),
        "final_learner": model.final_learner.to_dict(),
        "halves": [model.halves.first.tolist(), model.halves.second.tolist()],
        "forest1": [t.to_dict() for t in model.forest1.trees],
        "forest2": [t.to_dict() for t in model.forest2.trees],
    }


def model_from_dict(doc: Dict[str, Any], dataset: Dataset) -> OrfModel:
    """Rebuild a fitted model on the dataset it was fitted to."""
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"unsupported model format {doc.get('format')!r}")
    if doc["data_fingerprint"] != dataset.fingerprint():
        raise ConfigError("model was fitted to different data than the dataset supplied")
    missing = [key for key in ("halves", "forest1", "forest2") if not doc.get(key)]
    if missing:
        raise NotFittedError(f"model document has no fitted {', '.join(missing)}")
    cfg = ForestConfig.from_dict(doc["forest"])
    first, second = doc["halves"]
    halves = IndexSplit(np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64))
    forest1 = KernelForest([GradientTree.from_dict(t) for t in doc["forest1"]], halves.first, cfg)
    forest2 = KernelForest([GradientTree.from_dict(t) for t in doc["forest2"]], halves.second, cfg)
    return OrfModel(dataset, halves, forest1, forest2, LearnerSpec.from_dict(doc["final_learner"]), int(doc["seed"]))
