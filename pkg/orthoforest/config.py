"""Load and validate a run configuration (YAML) into typed dataclasses."""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import yaml

from .data import Dataset, DatasetSchema, load_schema
from .errors import ConfigError, SchemaError
from .nuisance import LearnerSpec
from .synthetic import DGPSpec, dgp_from_dict
from .tree import ForestConfig

ESTIMATOR_CHOICES = ("orf", "dml", "dmliv")
DEFAULT_GRID_POINTS = 29


# ── Dataclasses ──────────────────────────────────────────────

@dataclass
class DataConfig:
    csv: str = ""
    # Either a path to a YAML schema document or an inline column mapping
    schema_file: str = ""
    columns: Dict[str, Any] = field(default_factory=dict)
    group_column: str = ""


@dataclass
class TestPointsConfig:
    points: Optional[List[Any]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    step: Optional[float] = None
    extrapolate: bool = False


@dataclass
class BootstrapConfig:
    n_boot: int = 100
    level: float = 0.95
    cluster: bool = False


@dataclass
class DmlConfig:
    folds: int = 2
    instruments: List[str] = field(default_factory=list)
    project_instruments: bool = False
    x_window: Optional[List[float]] = None
    level: float = 0.95


@dataclass
class PolicyConfig:
    q_hat: Optional[Any] = None        # scalar or per-day list; null → mean outcome
    g_hat: Optional[Any] = None        # scalar or per-day list; null → mean treatment
    bounds: Optional[List[float]] = None
    windows: Dict[str, List[float]] = field(default_factory=lambda: {
        "whole": [-14.0, 14.0], "pre": [-14.0, 0.0], "post": [1.0, 14.0],
    })
    actual_price: Optional[float] = None
    curve_points: int = 101
    grid_step: float = 1e-3
    units: str = "level"


@dataclass
class BenchmarkConfig:
    scenarios: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    estimators: List[str] = field(default_factory=lambda: ["orf", "dml"])
    test_points: List[float] = field(default_factory=lambda: [-0.5, 0.0, 0.5])
    replicates: int = 1
    n_boot: int = 0


@dataclass
class ComparisonConfig:
    learners: Dict[str, Dict[str, Any]] = field(default_factory=lambda: {
        "lasso": {"kind": "lasso"}, "dnn": {"kind": "dnn"}, "sdnn": {"kind": "sdnn"},
    })
    train_fraction: float = 0.8


@dataclass
class OutputConfig:
    dir: str = "runs"


@dataclass
class LoggingConfig:
    dir: str = "logs"
    file: str = "orthoforest.log"
    level: str = "INFO"
    max_bytes: int = 10_485_760
    backup_count: int = 5
    console: bool = True


@dataclass
class AppConfig:
    data: DataConfig = field(default_factory=DataConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    final_learner: LearnerSpec = field(default_factory=lambda: LearnerSpec(kind="sdnn"))
    estimator: str = "orf"
    test_points: TestPointsConfig = field(default_factory=TestPointsConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    dml: DmlConfig = field(default_factory=DmlConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    comparison: ComparisonConfig = field(default_factory=ComparisonConfig)
    dgp: DGPSpec = field(default_factory=DGPSpec)
    output: OutputConfig = field(default_factory=OutputConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    seed: int = 0
    threads: Optional[int] = None
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def n_threads(self) -> int:
        if self.threads is not None:
            return int(self.threads)
        env = os.environ.get("ORF_THREADS", "")
        try:
            return max(1, int(env)) if env else 1
        except ValueError:
            raise ConfigError(f"ORF_THREADS must be an integer, got '{env}'") from None


# ── Loader ───────────────────────────────────────────────────

_SECTIONS = {
    "data": DataConfig,
    "test_points": TestPointsConfig,
    "bootstrap": BootstrapConfig,
    "dml": DmlConfig,
    "policy": PolicyConfig,
    "benchmark": BenchmarkConfig,
    "comparison": ComparisonConfig,
    "output": OutputConfig,
    "logging": LoggingConfig,
}
_SCALARS = ("estimator", "seed", "threads")
_BUILT = ("forest", "node_learner", "final_learner", "dgp")


def _coerce(value: Any, hint: Any, key: str) -> Any:
    """Convert a parsed YAML value to the field's declared type or name ``key`` in the error."""
    if value is None or hint is Any:
        return value
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is Union:
        options = [a for a in args if a is not type(None)]
        return _coerce(value, options[0], key) if len(options) == 1 else value
    if dataclasses.is_dataclass(hint):
        if isinstance(value, hint):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return coerce_mapping(hint, value, key)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        item = args[0] if args else Any
        return [_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        item = args[1] if len(args) == 2 else Any
        return {k: _coerce(v, item, f"{key}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if hint in (int, float):
        if isinstance(value, (bool, dict, list)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(value, int):
            return hint(value)
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if hint is int:
            if not number.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            return int(number)
        return number
    if hint is str:
        if isinstance(value, (bool, dict, list)):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return str(value)
    return value


def coerce_mapping(cls, data: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Type-check the known keys of ``data`` against dataclass ``cls``; unknown keys pass through."""
    hints = typing.get_type_hints(cls)
    return {k: _coerce(v, hints[k], f"{name}.{k}") if k in hints else v for k, v in data.items()}


def _build_section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        return cls(**coerce_mapping(cls, data, name))
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from e


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override '{item}' has an empty key")
        if keys[0] not in _SECTIONS and keys[0] not in _SCALARS and keys[0] not in _BUILT:
            raise ConfigError(f"unknown section '{keys[0]}' in override '{dotted}'")
        if keys[0] in _SCALARS and len(keys) > 1:
            raise ConfigError(f"'{keys[0]}' is a scalar setting; use {keys[0]}=value")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"override '{dotted}': cannot parse value {text!r}") from e
        node = out
        for k in keys[:-1]:
            if node.get(k) is None:
                node[k] = {}
            if not isinstance(node[k], dict):
                raise ConfigError(f"override '{dotted}': '{k}' is not a section")
            node = node[k]
        node[keys[-1]] = value
    return out


def build_config(raw: Dict[str, Any]) -> AppConfig:
    """Turn a raw mapping (parsed YAML plus overrides) into an AppConfig."""
    unknown = set(raw) - set(_SECTIONS) - set(_SCALARS) - set(_BUILT)
    if unknown:
        raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")
    cfg = AppConfig(raw=copy.deepcopy(raw))
    cfg.estimator = _coerce(raw.get("estimator", cfg.estimator), str, "estimator")
    cfg.seed = _coerce(raw.get("seed", cfg.seed), int, "seed")
    cfg.threads = _coerce(raw.get("threads"), int, "threads")
    for name, cls in _SECTIONS.items():
        setattr(cfg, name, _build_section(cls, raw.get(name), name))
    cfg.benchmark.scenarios = {
        name: coerce_mapping(DGPSpec, over or {}, f"benchmark.scenarios.{name}")
        for name, over in cfg.benchmark.scenarios.items()
    }
    cfg.comparison.learners = {
        name: coerce_mapping(LearnerSpec, doc or {}, f"comparison.learners.{name}")
        for name, doc in cfg.comparison.learners.items()
    }

    forest = _coerce(raw.get("forest") or {}, ForestConfig, "forest")
    if raw.get("node_learner") is not None:
        node = _coerce(raw["node_learner"], LearnerSpec, "node_learner")
        forest["node_learner"] = LearnerSpec.from_dict(node, "node_learner")
    forest.setdefault("seed", cfg.seed)
    cfg.forest = ForestConfig.from_dict(forest)
    if raw.get("final_learner") is not None:
        final = _coerce(raw["final_learner"], LearnerSpec, "final_learner")
        cfg.final_learner = LearnerSpec.from_dict(final, "final_learner")
    if raw.get("dgp") is not None:
        cfg.dgp = dgp_from_dict(_coerce(raw["dgp"], DGPSpec, "dgp"))
    return cfg


def load_config(path: str = "config.yaml", overrides: Sequence[str] = ()) -> AppConfig:
    """Load config.yaml, apply ``--set`` overrides and return an AppConfig."""
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path.resolve()}")
    with open(config_path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: expected a mapping at the top level")
    return build_config(apply_overrides(raw, overrides))


# ── Validation ───────────────────────────────────────────────

def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def validate_config(cfg: AppConfig, needs_data: bool = True) -> None:
    """Range checks on every numeric field and existence of referenced files."""
    if needs_data:
        _check(bool(cfg.data.csv), "data.csv", "no data file configured")
        _check(Path(cfg.data.csv).exists(), "data.csv", f"file not found: {cfg.data.csv}")
        _check(bool(cfg.data.schema_file) or bool(cfg.data.columns), "data.columns",
               "give either data.schema_file or an inline data.columns mapping")
        if cfg.data.schema_file:
            _check(Path(cfg.data.schema_file).exists(), "data.schema_file",
                   f"file not found: {cfg.data.schema_file}")
    _check(cfg.estimator in ESTIMATOR_CHOICES, "estimator", f"must be one of {ESTIMATOR_CHOICES}")
    _check(cfg.bootstrap.n_boot >= 20, "bootstrap.n_boot", "must be >= 20")
    _check(0 < cfg.bootstrap.level < 1, "bootstrap.level", "must be in (0, 1)")
    _check(cfg.dml.folds >= 2, "dml.folds", "must be >= 2")
    _check(0 < cfg.dml.level < 1, "dml.level", "must be in (0, 1)")
    if cfg.dml.x_window is not None:
        _check(len(cfg.dml.x_window) == 2 and cfg.dml.x_window[0] <= cfg.dml.x_window[1],
               "dml.x_window", "must be [lo, hi] with lo <= hi")
    if cfg.policy.bounds is not None:
        _check(len(cfg.policy.bounds) == 2 and cfg.policy.bounds[0] <= cfg.policy.bounds[1],
               "policy.bounds", "must be [lo, hi] with lo <= hi")
    _check(cfg.policy.curve_points >= 2, "policy.curve_points", "must be >= 2")
    _check(cfg.policy.grid_step > 0, "policy.grid_step", "must be > 0")
    for name, window in cfg.policy.windows.items():
        _check(len(window) == 2 and window[0] <= window[1], f"policy.windows.{name}", "must be [lo, hi]")
    _check(cfg.benchmark.replicates >= 1, "benchmark.replicates", "must be >= 1")
    _check(0 < cfg.comparison.train_fraction < 1, "comparison.train_fraction", "must be in (0, 1)")
    tp = cfg.test_points
    if tp.step is not None:
        _check(tp.step > 0, "test_points.step", "must be > 0")
        _check(tp.start is not None and tp.stop is not None and tp.start <= tp.stop,
               "test_points", "a range needs start <= stop")
    _check(cfg.n_threads >= 1, "threads", "must be >= 1")
    _check(cfg.logging.level.upper() in ("DEBUG", "INFO", "WARNING", "ERROR"), "logging.level",
           "must be DEBUG, INFO, WARNING or ERROR")
    _check(bool(cfg.logging.file), "logging.file", "must name a file")
    _check(cfg.logging.max_bytes >= 0, "logging.max_bytes", "must be >= 0")
    _check(cfg.logging.backup_count >= 0, "logging.backup_count", "must be >= 0")


def dataset_schema(cfg: AppConfig) -> DatasetSchema:
    schema = load_schema(cfg.data.schema_file) if cfg.data.schema_file else DatasetSchema.from_mapping(cfg.data.columns)
    if cfg.data.group_column:
        mapping = schema.to_mapping()
        existing = mapping.get(cfg.data.group_column)
        if existing is not None and existing["role"] != "group":
            raise SchemaError(f"data.group_column '{cfg.data.group_column}' already has role '{existing['role']}'")
        mapping[cfg.data.group_column] = {"role": "group", "transform": "none"}
        schema = DatasetSchema.from_mapping(mapping)
    return schema


def resolve_test_points(cfg: AppConfig, dataset: Dataset) -> np.ndarray:
    """Raw-unit test points as a (k, d) array.

    An explicit list wins, then a {start, stop, step} range (d = 1 only); with
    neither, 29 evenly spaced points across the observed first target feature.
    Points outside the observed X range are rejected unless ``extrapolate`` is set.
    """
    tp = cfg.test_points
    d = dataset.dims.d
    if tp.points is not None:
        pts = np.array(tp.points, dtype=np.float64)
        pts = pts.reshape(-1, 1) if pts.ndim == 1 and d == 1 else np.atleast_2d(pts)
    elif tp.step is not None:
        _check(d == 1, "test_points", "a range spec needs exactly one target feature")
        count = int(np.floor((tp.stop - tp.start) / tp.step + 1e-9)) + 1
        pts = (tp.start + tp.step * np.arange(count)).reshape(-1, 1)
    else:
        _check(d == 1, "test_points", "list the points explicitly when d > 1")
        raw_lo, raw_hi = _raw_range(dataset)
        pts = np.linspace(raw_lo, raw_hi, DEFAULT_GRID_POINTS).reshape(-1, 1)
    _check(pts.ndim == 2 and pts.shape[1] == d and len(pts) > 0, "test_points",
           f"points must have {d} coordinate(s) each")
    if not tp.extrapolate:
        stored = dataset.transform_points(pts)
        lo, hi = dataset.x.min(axis=0), dataset.x.max(axis=0)
        tol = 1e-9 * (1.0 + hi - lo)
        outside = np.flatnonzero(np.any((stored < lo - tol) | (stored > hi + tol), axis=1))
        if outside.size:
            raise ConfigError(
                f"test_points: {pts[outside[0]].tolist()} lies outside the observed X range "
                "(set test_points.extrapolate to allow)"
            )
    return pts


def _raw_range(dataset: Dataset):
    name = dataset.schema.by_role("target")[0]
    col = dataset.x[:, 0]
    lo, hi = float(col.min()), float(col.max())
    spec = {c.name: c for c in dataset.schema.columns}[name]
    if spec.transform == "log1p":
        return float(np.expm1(lo)), float(np.expm1(hi))
    if spec.transform == "standardize":
        center, scale = dataset.transforms[name]
        return lo * scale + center, hi * scale + center
    return lo, hi
