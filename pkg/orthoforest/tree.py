"""Honest gradient trees with orthogonalized Newton-proxy splitting.

A tree is grown on the S¹ half of a subsample: each node partials the nuisances out
of its own rows, fits the local effect θ̂_P, and scores candidate splits by how far a
one-step Newton update moves each child away from the parent. Leaves are then
populated with the S² half only, so the rows that picked the splits never carry a
leaf weight.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, IndexSplit
from .errors import (
    ConfigError,
    DegenerateHessianError,
    NodeError,
    NoTreatmentVariationError,
    OrthoForestError,
)
from .nuisance import LearnerSpec, fit_nuisance_pair
from .rng import derive_seed, make_rng

log = logging.getLogger("orthoforest")

MIN_NODE_ROWS = 5
VARIATION_TOL = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    subsample_size: Optional[int] = None
    subsample_ratio: float = 0.45
    min_leaf_size: int = 10
    min_balance: float = 0.1
    max_splits: int = 30
    n_features: Optional[int] = None
    n_proposals: int = 10
    node_learner: LearnerSpec = field(default_factory=LearnerSpec)
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"forest.n_trees must be >= 1, got {self.n_trees}")
        if self.subsample_size is not None and self.subsample_size < 2:
            raise ConfigError(f"forest.subsample_size must be >= 2, got {self.subsample_size}")
        if not 0 < self.subsample_ratio <= 1:
            raise ConfigError(f"forest.subsample_ratio must be in (0, 1], got {self.subsample_ratio}")
        if self.min_leaf_size < 1:
            raise ConfigError(f"forest.min_leaf_size must be >= 1, got {self.min_leaf_size}")
        if not 0 < self.min_balance <= 0.5:
            raise ConfigError(f"forest.min_balance must be in (0, 0.5], got {self.min_balance}")
        if self.max_splits < 0:
            raise ConfigError(f"forest.max_splits must be >= 0, got {self.max_splits}")
        if self.n_features is not None and self.n_features < 1:
            raise ConfigError(f"forest.n_features must be >= 1, got {self.n_features}")
        if self.n_proposals < 1:
            raise ConfigError(f"forest.n_proposals must be >= 1, got {self.n_proposals}")

    def to_dict(self) -> Dict[str, Any]:
        doc = {f: getattr(self, f) for f in _FOREST_KEYS}
        doc["node_learner"] = self.node_learner.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], where: str = "forest") -> "ForestConfig":
        doc = dict(doc or {})
        learner = doc.pop("node_learner", None)
        for key in doc:
            if key not in _FOREST_KEYS:
                raise ConfigError(f"unknown key '{where}.{key}'")
        try:
            if learner is not None:
                doc["node_learner"] = (
                    learner if isinstance(learner, LearnerSpec)
                    else LearnerSpec.from_dict(learner, "node_learner")
                )
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from e

    def subsample_for(self, n_half: int) -> int:
        s = self.subsample_size if self.subsample_size is not None else math.ceil(self.subsample_ratio * n_half)
        if not 2 <= s <= n_half:
            raise ConfigError(f"forest subsample size {s} must lie in [2, {n_half}]")
        return s

    def features_for(self, d: int) -> int:
        m = self.n_features if self.n_features is not None else math.ceil(math.sqrt(d))
        if m > d:
            raise ConfigError(f"forest.n_features={m} exceeds the {d} target features")
        return m


_FOREST_KEYS = (
    "n_trees", "subsample_size", "subsample_ratio", "min_leaf_size", "min_balance",
    "max_splits", "n_features", "n_proposals", "seed",
)


# ── Node primitives ──────────────────────────────────────────

def propose_splits(features: np.ndarray, m: int, k: int, seed: int) -> List[Tuple[int, float]]:
    """Pick ``m`` target columns and up to ``k`` distinct observed values in each as thresholds.

    Candidates come back sorted by (feature, threshold).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise NodeError("cannot propose splits for an empty node")
    d = X.shape[1]
    if not 1 <= m <= d:
        raise ConfigError(f"features per split must be in [1, {d}], got {m}")
    rng = make_rng(seed, "propose")
    cols = np.sort(rng.choice(d, size=m, replace=False))
    out: List[Tuple[int, float]] = []
    for j in cols:
        values = np.unique(X[:, j])
        picks = values if len(values) <= k else np.sort(rng.choice(values, size=k, replace=False))
        out.extend((int(j), float(v)) for v in picks)
    return out


def node_residualize(
    dataset: Dataset,
    rows: Sequence[int],
    spec: LearnerSpec,
    seed: int,
    min_rows: int = MIN_NODE_ROWS,
    path: str = "",
) -> Tuple[np.ndarray, np.ndarray]:
    """Fit q̂_P, ĝ_P on the node's own rows (unweighted) and return (Ỹ, T̃) there."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < min_rows:
        raise NodeError(f"{rows.size} rows is below the residualization floor {min_rows}", path)
    try:
        pair = fit_nuisance_pair(dataset, rows, None, spec, seed)
        return pair.residualize(dataset, rows)
    except NodeError:
        raise
    except OrthoForestError as e:
        raise NodeError(f"node nuisance fit failed: {e}", path) from e


def fit_node_theta(y_res: np.ndarray, t_res: np.ndarray) -> Tuple[float, float]:
    """θ̂_P = ΣT̃Ỹ / ΣT̃² and the Hessian term A_P = −ΣT̃² / n."""
    y_res = np.asarray(y_res, dtype=np.float64)
    t_res = np.asarray(t_res, dtype=np.float64)
    sxx = float(t_res @ t_res)
    if sxx <= VARIATION_TOL:
        raise NoTreatmentVariationError(f"treatment residuals carry no variation (sum of squares {sxx:.3g})")
    return float(t_res @ y_res) / sxx, -sxx / len(t_res)


def newton_proxy(theta_p: float, a_p: float, y_res: np.ndarray, t_res: np.ndarray) -> float:
    """θ̃_C = θ̂_P − Σ_{i∈C} A_P⁻¹ (Ỹᵢ − θ̂_P T̃ᵢ) T̃ᵢ, summed over the child's rows."""
    if a_p == 0:
        raise DegenerateHessianError("parent Hessian term is zero")
    y_res = np.asarray(y_res, dtype=np.float64)
    t_res = np.asarray(t_res, dtype=np.float64)
    return theta_p - float((y_res - theta_p * t_res) @ t_res) / a_p


def heterogeneity_score(theta_c1: float, theta_c2: float, theta_p: float, sizes: Tuple[int, int]) -> float:
    n1, n2 = sizes
    return (theta_c1 - theta_p) ** 2 / n1 + (theta_c2 - theta_p) ** 2 / n2


# ── Tree ─────────────────────────────────────────────────────

@dataclass
class TreeNode:
    path: str = ""
    feature: int = -1
    threshold: float = math.nan
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    theta: float = math.nan
    hessian: float = math.nan
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class GradientTree:
    """Fitted tree plus the S² row lists of its leaves (dataset row indices)."""

    def __init__(self, root: TreeNode, leaves: Dict[int, np.ndarray], split: IndexSplit) -> None:
        self.root = root
        self.leaves = leaves
        self.split = split

    def leaf_of(self, x: np.ndarray) -> int:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.leaf_id

    def members(self, x: np.ndarray) -> np.ndarray:
        return self.leaves[self.leaf_of(x)]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def nodes(self) -> List[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return out

    def is_honest(self) -> bool:
        """Leaves hold only S² rows, every S² row exactly once, and no S¹ row."""
        listed = np.concatenate(list(self.leaves.values())) if self.leaves else np.zeros(0, dtype=np.int64)
        if np.intersect1d(listed, self.split.first).size:
            return False
        return len(listed) == len(np.unique(listed)) and np.array_equal(np.sort(listed), np.sort(self.split.second))

    # ── Export ───────────────────────────────────────────────

    def to_dict(self) -> Dict[str, Any]:
        nodes = self.nodes()
        pos = {id(n): i for i, n in enumerate(nodes)}
        return {
            "feature": [n.feature for n in nodes],
            "threshold": [None if math.isnan(n.threshold) else n.threshold for n in nodes],
            "left": [-1 if n.is_leaf else pos[id(n.left)] for n in nodes],
            "right": [-1 if n.is_leaf else pos[id(n.right)] for n in nodes],
            "theta": [None if math.isnan(n.theta) else n.theta for n in nodes],
            "hessian": [None if math.isnan(n.hessian) else n.hessian for n in nodes],
            "leaf_id": [n.leaf_id for n in nodes],
            "path": [n.path for n in nodes],
            "leaves": {str(k): v.tolist() for k, v in sorted(self.leaves.items())},
            "split": [self.split.first.tolist(), self.split.second.tolist()],
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "GradientTree":
        def num(v):
            return math.nan if v is None else float(v)

        nodes = [
            TreeNode(path=p, feature=int(f), threshold=num(t), theta=num(th), hessian=num(h), leaf_id=int(lid))
            for p, f, t, th, h, lid in zip(
                doc["path"], doc["feature"], doc["threshold"], doc["theta"], doc["hessian"], doc["leaf_id"]
            )
        ]
        for node, left, right in zip(nodes, doc["left"], doc["right"]):
            if left >= 0:
                node.left, node.right = nodes[left], nodes[right]
        leaves = {int(k): np.asarray(v, dtype=np.int64) for k, v in doc["leaves"].items()}
        first, second = doc["split"]
        split = IndexSplit(np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64))
        return cls(nodes[0], leaves, split)


def _score_candidates(
    x1: np.ndarray,
    x2: np.ndarray,
    y_res: np.ndarray,
    t_res: np.ndarray,
    theta_p: float,
    a_p: float,
    candidates: List[Tuple[int, float]],
    cfg: ForestConfig,
) -> Optional[Tuple[int, float, float]]:
    n1, n2 = len(x1), len(x2)
    best: Optional[Tuple[int, float, float]] = None
    for feature, threshold in candidates:
        left1 = x1[:, feature] <= threshold
        left2 = x2[:, feature] <= threshold
        c1 = (int(left1.sum()), n1 - int(left1.sum()))
        c2 = (int(left2.sum()), n2 - int(left2.sum()))
        if min(c1 + c2) < cfg.min_leaf_size:
            continue
        if min(c1) / n1 < cfg.min_balance or min(c2) / n2 < cfg.min_balance:
            continue
        theta_l = newton_proxy(theta_p, a_p, y_res[left1], t_res[left1])
        theta_r = newton_proxy(theta_p, a_p, y_res[~left1], t_res[~left1])
        score = heterogeneity_score(theta_l, theta_r, theta_p, c1)
        log.debug("candidate x%d <= %.6g: counts %s/%s score %.6g", feature, threshold, c1, c2, score)
        # strict > keeps the lowest (feature, threshold) among ties
        if best is None or score > best[2]:
            best = (feature, threshold, score)
    return best


def grow_tree(dataset: Dataset, split: IndexSplit, cfg: ForestConfig, seed: int) -> GradientTree:
    """Grow one honest tree breadth-first.

    Splits are chosen on ``split.first`` (S¹) and the leaves list ``split.second``
    (S²) rows. A node becomes a leaf when it has too few S¹ rows to residualize,
    when its treatment residuals carry no variation, when no candidate leaves at
    least ``min_leaf_size`` rows of both halves in each child with the required
    balance, or once ``max_splits`` splits have been made.
    """
    s1, s2 = split
    X = dataset.x
    m = cfg.features_for(dataset.dims.d)
    floor = max(MIN_NODE_ROWS, cfg.min_leaf_size)

    root = TreeNode(path="")
    leaves: Dict[int, np.ndarray] = {}
    queue: Deque[Tuple[TreeNode, np.ndarray, np.ndarray]] = deque([(root, s1, s2)])
    n_splits = 0

    def seal(node: TreeNode, rows2: np.ndarray) -> None:
        node.leaf_id = len(leaves)
        leaves[node.leaf_id] = np.sort(rows2)

    while queue:
        node, rows1, rows2 = queue.popleft()
        if len(rows1) < floor:
            seal(node, rows2)
            continue
        node_seed = derive_seed(seed, "node", node.path)
        y_res, t_res = node_residualize(dataset, rows1, cfg.node_learner, node_seed, floor, node.path)
        try:
            node.theta, node.hessian = fit_node_theta(y_res, t_res)
        except NoTreatmentVariationError:
            log.warning("node '%s' has no treatment variation; sealed as leaf", node.path or "root")
            seal(node, rows2)
            continue
        if n_splits >= cfg.max_splits:
            seal(node, rows2)
            continue

        x1, x2 = X[rows1], X[rows2]
        candidates = propose_splits(x1, m, cfg.n_proposals, node_seed)
        best = _score_candidates(x1, x2, y_res, t_res, node.theta, node.hessian, candidates, cfg)
        if best is None:
            log.debug("node '%s': no valid split among %d candidates", node.path or "root", len(candidates))
            seal(node, rows2)
            continue

        node.feature, node.threshold = best[0], best[1]
        node.left, node.right = TreeNode(path=node.path + "L"), TreeNode(path=node.path + "R")
        go_left1 = x1[:, node.feature] <= node.threshold
        go_left2 = x2[:, node.feature] <= node.threshold
        queue.append((node.left, rows1[go_left1], rows2[go_left2]))
        queue.append((node.right, rows1[~go_left1], rows2[~go_left2]))
        n_splits += 1

    return GradientTree(root, leaves, split)
