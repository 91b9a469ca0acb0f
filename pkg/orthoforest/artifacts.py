"""Run outputs: atomic JSON documents, estimate tables, manifests and SVG charts."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .forest import EffectEstimate

log = logging.getLogger("orthoforest")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def save_json(doc: Any, path: str) -> Path:
    """Write ``doc`` as JSON via a temp file and an atomic rename.

    Non-finite floats become ``null``.
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(_jsonable(doc), f, ensure_ascii=False, indent=2, allow_nan=False)
            f.write("\n")
        tmp.replace(out)
    except Exception:
        if tmp.exists():
            tmp.unlink()
        raise
    return out


def load_json(path: str) -> Any:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"JSON file not found: {p.resolve()}")
    with open(p, "r", encoding="utf-8") as f:
        return json.load(f)


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def save_table(rows: Sequence[Dict[str, Any]], path: str, columns: Optional[List[str]] = None) -> Path:
    """CSV with shortest round-trip floats and empty cells for missing values."""
    columns = columns or (list(rows[0].keys()) if rows else [])
    frame = pd.DataFrame([[_cell(r.get(c)) for c in columns] for r in rows], columns=columns)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, encoding="utf-8", lineterminator="\n")
    return out


def estimate_columns(d: int) -> List[str]:
    xs = ["x"] if d == 1 else [f"x{j}" for j in range(d)]
    return xs + ["theta", "ci_low", "ci_high"]


def estimate_rows(estimates: Sequence[EffectEstimate]) -> List[Dict[str, Any]]:
    rows = []
    for e in estimates:
        coords = {"x": e.x[0]} if len(e.x) == 1 else {f"x{j}": v for j, v in enumerate(e.x)}
        rows.append({**coords, "theta": e.theta, "ci_low": e.ci_low, "ci_high": e.ci_high})
    return rows


def save_estimates(estimates: Sequence[EffectEstimate], directory: str, stem: str = "effects") -> List[Path]:
    """``<stem>.csv`` with columns x…, theta, ci_low, ci_high and a mirroring ``<stem>.json``."""
    d = len(estimates[0].x) if estimates else 1
    base = Path(directory)
    csv_path = save_table(estimate_rows(estimates), str(base / f"{stem}.csv"), estimate_columns(d))
    json_path = save_json(
        [{**e.row(), "n_effective": e.n_effective} for e in estimates], str(base / f"{stem}.json")
    )
    return [csv_path, json_path]


def config_hash(config_doc: Dict[str, Any]) -> str:
    canonical = json.dumps(_jsonable(config_doc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(
    directory: str,
    command: str,
    config_doc: Dict[str, Any],
    seed: int,
    started: float,
    outputs: Sequence[Path],
) -> Path:
    from . import __version__

    return save_json(
        {
            "command": command,
            "config_sha256": config_hash(config_doc),
            "seed": seed,
            "version": __version__,
            "wall_time_seconds": round(time.perf_counter() - started, 3),
            "outputs": sorted(Path(p).name for p in outputs),
        },
        str(Path(directory) / f"manifest-{command}.json"),
    )


def save_effect_chart(estimates: Sequence[EffectEstimate], path: str, xlabel: str = "x", title: str = "") -> Path:
    """Minimal line chart of θ̂ against the first coordinate, with the interval band if present."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ordered = sorted(estimates, key=lambda e: e.x[0])
    x = np.array([e.x[0] for e in ordered])
    theta = np.array([e.theta for e in ordered])
    with matplotlib.rc_context({"svg.hashsalt": "orthoforest", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if all(e.ci_low is not None for e in ordered):
            lo = np.array([e.ci_low for e in ordered])
            hi = np.array([e.ci_high for e in ordered])
            ax.fill_between(x, lo, hi, color="tab:blue", alpha=0.2, linewidth=0)
        ax.plot(x, theta, color="tab:blue", marker="o", markersize=3)
        ax.axhline(0.0, color="0.6", linewidth=0.8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("theta")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
