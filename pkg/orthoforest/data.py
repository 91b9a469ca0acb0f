"""Role-tagged observation panel: schema, CSV ingestion, transforms and sample splits."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from .errors import IngestionError, SchemaError, SizeError
from .rng import make_rng

log = logging.getLogger("orthoforest")

ROLES = ("outcome", "treatment", "target", "parametric", "nonparametric", "instrument", "group")
TRANSFORMS = ("none", "log1p", "standardize")


# ── Schema ───────────────────────────────────────────────────

@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    transform: str = "none"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"column '{self.name}': unknown role '{self.role}' (expected one of {ROLES})")
        if self.transform not in TRANSFORMS:
            raise SchemaError(
                f"column '{self.name}': unknown transform '{self.transform}' (expected one of {TRANSFORMS})"
            )
        if self.role == "group" and self.transform != "none":
            raise SchemaError(f"column '{self.name}': group columns take no transform")


@dataclass(frozen=True)
class Dims:
    d: int
    p1: int
    p2: int
    q: int


@dataclass(frozen=True)
class DatasetSchema:
    """Column → role/transform map. Column order within a role is the vector order."""

    columns: Tuple[ColumnSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"columns mapped more than once: {dupes}")
        for role in ("outcome", "treatment"):
            count = sum(1 for c in self.columns if c.role == role)
            if count != 1:
                raise SchemaError(f"exactly one column must have role '{role}', found {count}")
        if not self.by_role("target"):
            raise SchemaError("at least one column must have role 'target'")
        if len(self.by_role("group")) > 1:
            raise SchemaError("at most one column may have role 'group'")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "DatasetSchema":
        """Build from ``{column: role}`` or ``{column: {role: ..., transform: ...}}``."""
        cols: List[ColumnSpec] = []
        for name, entry in mapping.items():
            if isinstance(entry, str):
                cols.append(ColumnSpec(str(name), entry))
            elif isinstance(entry, Mapping):
                if "role" not in entry:
                    raise SchemaError(f"column '{name}': missing 'role'")
                cols.append(ColumnSpec(str(name), str(entry["role"]), str(entry.get("transform", "none"))))
            else:
                raise SchemaError(f"column '{name}': expected a role string or a mapping")
        return cls(tuple(cols))

    def to_mapping(self) -> Dict[str, Dict[str, str]]:
        return {c.name: {"role": c.role, "transform": c.transform} for c in self.columns}

    def by_role(self, role: str) -> List[str]:
        return [c.name for c in self.columns if c.role == role]

    def without_transforms(self) -> "DatasetSchema":
        return DatasetSchema(tuple(ColumnSpec(c.name, c.role) for c in self.columns))

    @property
    def outcome(self) -> str:
        return self.by_role("outcome")[0]

    @property
    def treatment(self) -> str:
        return self.by_role("treatment")[0]

    @property
    def group(self) -> Optional[str]:
        g = self.by_role("group")
        return g[0] if g else None

    @property
    def dims(self) -> Dims:
        return Dims(
            d=len(self.by_role("target")),
            p1=len(self.by_role("parametric")),
            p2=len(self.by_role("nonparametric")),
            q=len(self.by_role("instrument")),
        )


def load_schema(path: str) -> DatasetSchema:
    """Read a YAML schema document (``columns:`` mapping, or the mapping itself)."""
    schema_path = Path(path)
    if not schema_path.exists():
        raise FileNotFoundError(f"Schema file not found: {schema_path.resolve()}")
    with open(schema_path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{schema_path}: expected a mapping at the top level")
    return DatasetSchema.from_mapping(raw.get("columns", raw))


def save_schema(schema: DatasetSchema, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"columns": schema.to_mapping()}, f, sort_keys=False, allow_unicode=True)


# ── Dataset ──────────────────────────────────────────────────

@dataclass(frozen=True)
class Observation:
    y: float
    t: float
    x: np.ndarray
    wp: np.ndarray
    wn: np.ndarray
    z: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable columnar panel.

    Arrays: ``y`` (n,), ``t`` (n,), ``x`` (n, d), ``wp`` (n, p1), ``wn`` (n, p2),
    ``z`` (n, q) and optional ``groups`` (n,) cluster labels.
    ``transforms`` records the (center, scale) applied to each transformed column
    so that test points can be mapped into the same units.
    """

    def __init__(
        self,
        schema: DatasetSchema,
        y: np.ndarray,
        t: np.ndarray,
        x: np.ndarray,
        wp: Optional[np.ndarray] = None,
        wn: Optional[np.ndarray] = None,
        z: Optional[np.ndarray] = None,
        groups: Optional[np.ndarray] = None,
        transforms: Optional[Dict[str, Tuple[float, float]]] = None,
    ) -> None:
        n = len(y)
        dims = schema.dims
        self.schema = schema
        self.y = _frozen(np.reshape(y, (n,)))
        self.t = _frozen(np.reshape(t, (n,)))
        self.x = _frozen(np.reshape(x, (n, dims.d)))
        self.wp = _frozen(np.zeros((n, 0)) if wp is None else np.reshape(wp, (n, dims.p1)))
        self.wn = _frozen(np.zeros((n, 0)) if wn is None else np.reshape(wn, (n, dims.p2)))
        self.z = _frozen(np.zeros((n, 0)) if z is None else np.reshape(z, (n, dims.q)))
        if groups is not None:
            groups = np.asarray(groups)
            if groups.shape != (n,):
                raise SchemaError(f"group labels must have shape ({n},), got {groups.shape}")
            groups.setflags(write=False)
        self.groups = groups
        self.transforms: Dict[str, Tuple[float, float]] = dict(transforms or {})
        if len(self.t) != n:
            raise SchemaError("outcome and treatment lengths differ")

    # ── Shape ────────────────────────────────────────────────

    @property
    def n(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return self.n

    @property
    def dims(self) -> Dims:
        return self.schema.dims

    def features(self) -> np.ndarray:
        """Nuisance inputs in the canonical ``[x | wp | wn]`` column order."""
        return np.hstack([self.x, self.wp, self.wn])

    def __getitem__(self, i: int) -> Observation:
        """Row ``i`` as an :class:`Observation`; negative indices count from the end."""
        if not -self.n <= i < self.n:
            raise IndexError(f"row {i} out of range for {self.n} observations")
        return Observation(
            y=float(self.y[i]), t=float(self.t[i]),
            x=self.x[i], wp=self.wp[i], wn=self.wn[i], z=self.z[i],
        )

    def __iter__(self) -> Iterator[Observation]:
        return (self[i] for i in range(self.n))

    def take(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.schema, self.y[idx], self.t[idx], self.x[idx], self.wp[idx], self.wn[idx], self.z[idx],
            None if self.groups is None else self.groups[idx], self.transforms,
        )

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map raw-unit target points through the target columns' ingestion transforms."""
        pts = np.array(points, dtype=np.float64, ndmin=2)
        out = pts.copy()
        by_name = {c.name: c for c in self.schema.columns}
        for j, name in enumerate(self.schema.by_role("target")):
            spec = by_name[name]
            if spec.transform == "log1p":
                out[:, j] = np.log1p(out[:, j])
            elif spec.transform == "standardize":
                center, scale = self.transforms[name]
                out[:, j] = (out[:, j] - center) / scale
        return out

    def fingerprint(self) -> str:
        """sha256 over the stored numeric arrays; ties a saved model to its data."""
        h = hashlib.sha256()
        for arr in (self.y, self.t, self.x, self.wp, self.wn, self.z):
            h.update(str(arr.shape).encode("ascii"))
            h.update(arr.tobytes())
        return h.hexdigest()

    def column(self, name: str) -> np.ndarray:
        """Stored (post-transform) values of a named schema column."""
        for role, arr in (("target", self.x), ("parametric", self.wp),
                          ("nonparametric", self.wn), ("instrument", self.z)):
            names = self.schema.by_role(role)
            if name in names:
                return arr[:, names.index(name)]
        if name == self.schema.outcome:
            return self.y
        if name == self.schema.treatment:
            return self.t
        if name == self.schema.group and self.groups is not None:
            return self.groups
        raise SchemaError(f"column '{name}' not in schema")


# ── Ingestion ────────────────────────────────────────────────

def _parse_column(raw: Sequence[str], name: str) -> np.ndarray:
    try:
        values = np.asarray(raw, dtype=np.float64)
    except ValueError:
        values = None
    if values is None:
        for i, cell in enumerate(raw):
            try:
                float(cell)
            except ValueError:
                raise IngestionError(
                    f"data row {i + 1}, column '{name}': cannot parse {cell!r} as a number",
                    row=i + 1, column=name,
                ) from None
        values = np.array([float(c) for c in raw], dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise IngestionError(
            f"data row {i + 1}, column '{name}': non-finite value {raw[i]!r}",
            row=i + 1, column=name,
        )
    return values


def _apply_transform(values: np.ndarray, spec: ColumnSpec) -> Tuple[np.ndarray, Optional[Tuple[float, float]]]:
    if spec.transform == "log1p":
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log1p(values)
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            i = int(bad[0])
            raise IngestionError(
                f"data row {i + 1}, column '{spec.name}': log1p undefined for {values[i]!r}",
                row=i + 1, column=spec.name,
            )
        return out, None
    if spec.transform == "standardize":
        center = float(np.mean(values)) if values.size else 0.0
        centered = values - center
        # second pass removes the rounding left by the first mean
        residual_mean = float(np.mean(centered)) if values.size else 0.0
        centered = centered - residual_mean
        center += residual_mean
        scale = float(np.std(centered, ddof=1)) if values.size > 1 else 0.0
        if scale <= 0.0 or not math.isfinite(scale):
            log.warning("column '%s' is constant; standardize only centers it", spec.name)
            return centered, (center, 1.0)
        return centered / scale, (center, scale)
    return values, None


def load_dataset(path: str, schema: DatasetSchema) -> Dataset:
    """Read a headered UTF-8 CSV and assemble a Dataset per ``schema``."""
    csv_path = Path(path)
    if not csv_path.exists():
        raise FileNotFoundError(f"Data file not found: {csv_path.resolve()}")
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c.name for c in schema.columns if c.name not in frame.columns]
    if missing:
        raise SchemaError(f"{csv_path.name}: columns missing from header: {missing}")

    values: Dict[str, np.ndarray] = {}
    transforms: Dict[str, Tuple[float, float]] = {}
    groups = None
    for spec in schema.columns:
        raw = frame[spec.name].str.strip().tolist()
        if spec.role == "group":
            groups = np.asarray(raw, dtype=object)
            continue
        parsed, params = _apply_transform(_parse_column(raw, spec.name), spec)
        values[spec.name] = parsed
        if params is not None:
            transforms[spec.name] = params

    n = len(frame)

    def stack(role: str) -> np.ndarray:
        names = schema.by_role(role)
        if not names:
            return np.zeros((n, 0))
        return np.column_stack([values[c] for c in names])

    dims = schema.dims
    if dims.p1 == 0 and dims.p2 == 0:
        log.warning("schema has no covariate columns; nuisance fits use the target features only")
    ds = Dataset(
        schema,
        y=values[schema.outcome], t=values[schema.treatment],
        x=stack("target"), wp=stack("parametric"), wn=stack("nonparametric"), z=stack("instrument"),
        groups=groups, transforms=transforms,
    )
    log.info("Loaded %s: n=%d d=%d p1=%d p2=%d q=%d", csv_path.name, ds.n, dims.d, dims.p1, dims.p2, dims.q)
    return ds


def write_dataset(dataset: Dataset, path: str) -> None:
    """Write stored values as CSV using shortest round-trip float text."""
    cols: Dict[str, List[str]] = {}
    for spec in dataset.schema.columns:
        arr = dataset.column(spec.name)
        if spec.role == "group":
            cols[spec.name] = [str(v) for v in arr]
        else:
            cols[spec.name] = [repr(float(v)) for v in arr]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(cols).to_csv(out, index=False, encoding="utf-8", lineterminator="\n")


# ── Sample partitioning ──────────────────────────────────────

@dataclass(frozen=True)
class IndexSplit:
    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.first, self.second).size:
            raise SizeError("index split halves overlap")

    def __iter__(self):
        return iter((self.first, self.second))

    @property
    def union(self) -> np.ndarray:
        return np.sort(np.concatenate([self.first, self.second]))


def _halve(indices: np.ndarray) -> IndexSplit:
    half = len(indices) // 2
    return IndexSplit(np.sort(indices[:half]), np.sort(indices[half:]))


def split_halves(dataset: Dataset, seed: int) -> IndexSplit:
    """Uniformly random disjoint halves of the row index set."""
    n = dataset.n
    if n < 2:
        raise SizeError(f"split_halves needs n >= 2, got {n}")
    rng = make_rng(seed, "split_halves")
    return _halve(rng.permutation(n))


def subsample(dataset: Dataset, s: int, seed: int, over: Optional[Iterable[int]] = None) -> IndexSplit:
    """Draw ``s`` rows without replacement (from ``over`` if given) and halve them."""
    pool = np.arange(dataset.n) if over is None else np.asarray(list(over), dtype=np.int64)
    if not 2 <= s <= len(pool):
        raise SizeError(f"subsample size s={s} must satisfy 2 <= s <= {len(pool)}")
    rng = make_rng(seed, "subsample")
    return _halve(rng.choice(pool, size=s, replace=False))
