"""Command-line front end.

    python run_orf.py fit        -c config.yaml           # grow the forests, write model.json
    python run_orf.py effects    -c config.yaml           # θ̂ at the test points
    python run_orf.py bootstrap  -c config.yaml           # θ̂ with percentile intervals
    python run_orf.py dml | dmliv -c config.yaml          # cross-fitted average effect
    python run_orf.py policy     -c config.yaml           # optimal price per window
    python run_orf.py benchmark  -c config.yaml           # score estimators on synthetic data
    python run_orf.py plot-data  -c config.yaml           # (x, theta, ci) series + SVG
    python run_orf.py generate   -c config.yaml           # write a synthetic CSV + schema
    python run_orf.py learners   -c config.yaml           # nuisance learner comparison

Every key of the config can be overridden with ``--set section.key=value``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .artifacts import (
    config_hash,
    estimate_rows,
    load_json,
    save_effect_chart,
    save_estimates,
    save_json,
    save_table,
    write_manifest,
)
from .benchmark import run_benchmark
from .config import AppConfig, coerce_mapping, dataset_schema, load_config, resolve_test_points, validate_config
from .data import Dataset, load_dataset, save_schema, write_dataset
from .dml import CrossFitPlan, fit_dml, fit_dmliv, first_stage_test, select_window
from .errors import ConfigError, NonConcaveError, NotFittedError, OrthoForestError
from .forest import (
    EffectEstimate,
    OrfModel,
    bootstrap_ci,
    estimate_effects,
    fit_orf,
    model_from_dict,
    model_to_dict,
)
from .logger import setup_logging
from .nuisance import LearnerSpec, compare_learners
from .policy import (
    grid_search_price,
    optimal_price,
    policy_inputs_from_effects,
    price_windows,
    revenue,
    revenue_curve,
)
from .rng import derive_seed
from .synthetic import DGPSpec, dgp_from_dict, generate

log = logging.getLogger("orthoforest")

COMMANDS = ("fit", "effects", "bootstrap", "dml", "dmliv", "policy", "benchmark", "plot-data", "generate", "learners")
NO_DATA = ("benchmark", "generate")


class Run:
    """State shared by one CLI invocation: config, output directory and written files."""

    def __init__(self, cfg: AppConfig, command: str) -> None:
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.output.dir)
        self.outputs: List[Path] = []
        self.threads = cfg.n_threads
        self._dataset: Optional[Dataset] = None

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.cfg.data.csv, dataset_schema(self.cfg))
        return self._dataset

    def wrote(self, *paths: Path) -> None:
        for p in paths:
            log.info("wrote %s", p)
        self.outputs.extend(paths)

    # ── Shared pipeline steps ────────────────────────────────

    def fit_model(self) -> OrfModel:
        model = fit_orf(self.dataset, self.cfg.forest, self.cfg.final_learner, self.cfg.seed, self.threads)
        self.wrote(save_json(model_to_dict(model), str(self.out / "model.json")))
        return model

    def model(self) -> OrfModel:
        """Reuse ``model.json`` when it was fitted to this data and config, else fit afresh."""
        path = self.out / "model.json"
        if path.exists():
            try:
                doc = load_json(str(path))
                if (doc.get("forest") != self.cfg.forest.to_dict()
                        or doc.get("final_learner") != self.cfg.final_learner.to_dict()
                        or doc.get("seed") != self.cfg.seed):
                    raise ConfigError("forest, learner or seed settings changed")
                model = model_from_dict(doc, self.dataset)
                log.info("reusing fitted model %s", path)
                return model
            except (ConfigError, NotFittedError) as e:
                log.warning("cannot reuse %s (%s); refitting", path, e)
        return self.fit_model()

    def test_points(self):
        raw = resolve_test_points(self.cfg, self.dataset)
        return raw, self.dataset.transform_points(raw)

    def effects(self) -> List[EffectEstimate]:
        """θ̂ at the test points from the configured estimator.

        ``dml`` and ``dmliv`` give one average effect, reported at every point.
        """
        raw, stored = self.test_points()
        if self.cfg.estimator != "orf":
            est, _ = _fit_ate(self, iv=self.cfg.estimator == "dmliv")
            return [EffectEstimate(tuple(float(v) for v in p), est.theta, est.ci_low, est.ci_high) for p in raw]
        estimates = estimate_effects(self.model(), stored, self.threads)
        return _relabel(estimates, raw)


def _relabel(estimates: Sequence[EffectEstimate], raw: np.ndarray) -> List[EffectEstimate]:
    """Report estimates at the raw-unit coordinates the user asked for."""
    return [dataclasses.replace(e, x=tuple(float(v) for v in p)) for e, p in zip(estimates, raw)]


# ── Subcommands ──────────────────────────────────────────────

def cmd_fit(run: Run) -> None:
    run.fit_model()


def cmd_effects(run: Run) -> None:
    run.wrote(*save_estimates(run.effects(), str(run.out), "effects"))


def cmd_bootstrap(run: Run) -> None:
    cfg = run.cfg
    raw, stored = run.test_points()
    estimates = bootstrap_ci(
        run.dataset, cfg.forest, cfg.final_learner, stored,
        cfg.bootstrap.n_boot, cfg.bootstrap.level, cfg.seed, run.threads, cfg.bootstrap.cluster,
    )
    run.wrote(*save_estimates(_relabel(estimates, raw), str(run.out), "bootstrap"))


def _instrument_indices(run: Run) -> List[int]:
    names = run.dataset.schema.by_role("instrument")
    if not names:
        raise ConfigError("dmliv: the schema has no column with role 'instrument'")
    wanted = run.cfg.dml.instruments or names[:1]
    missing = [c for c in wanted if c not in names]
    if missing:
        raise ConfigError(f"dml.instruments: {missing} are not instrument columns")
    return [names.index(c) for c in wanted]


def _fit_ate(run: Run, iv: bool):
    cfg = run.cfg
    ds = select_window(run.dataset, cfg.dml.x_window)
    plan = CrossFitPlan.make(ds.n, cfg.dml.folds, derive_seed(cfg.seed, "crossfit"))
    if iv:
        cols = _instrument_indices(run)
        est = fit_dmliv(ds, cfg.final_learner, plan, cols, cfg.dml.project_instruments, cfg.dml.level, run.threads)
        f, p, df1, df2 = first_stage_test(ds, cols)
        doc = {**est.to_dict(), "first_stage": {"f": f, "p_value": p, "df1": df1, "df2": df2}}
    else:
        est = fit_dml(ds, cfg.final_learner, plan, cfg.dml.level, run.threads)
        doc = est.to_dict()
    doc["x_window"] = cfg.dml.x_window
    return est, doc


def _ate_command(run: Run, iv: bool) -> None:
    est, doc = _fit_ate(run, iv)
    run.wrote(save_json(doc, str(run.out / f"{est.estimator}.json")))
    print(est.summary())


def cmd_dml(run: Run) -> None:
    _ate_command(run, iv=False)


def cmd_dmliv(run: Run) -> None:
    _ate_command(run, iv=True)


def cmd_policy(run: Run) -> None:
    pol = run.cfg.policy
    ds = run.dataset
    bounds = pol.bounds or [float(ds.t.min()), float(ds.t.max())]
    inputs = policy_inputs_from_effects(
        run.effects(),
        q_hat=float(ds.y.mean()) if pol.q_hat is None else pol.q_hat,
        g_hat=float(ds.t.mean()) if pol.g_hat is None else pol.g_hat,
        bounds=(bounds[0], bounds[1]),
        units=pol.units,
    )
    windows = {}
    for name, (lo, hi) in pol.windows.items():
        if np.any((inputs.days >= lo) & (inputs.days <= hi)):
            windows[name] = (lo, hi)
        else:
            log.warning("policy window '%s' [%g, %g] holds no test point; skipped", name, lo, hi)
    result = price_windows(inputs, windows, pol.actual_price, pol.grid_step) if windows else {"windows": {}}
    try:
        t_star = optimal_price(inputs)
    except NonConcaveError as e:
        log.warning("%s; reporting the grid maximizer", e)
        t_star = grid_search_price(inputs, pol.grid_step)
    prices, values = revenue_curve(inputs, pol.curve_points)
    result.update({"t_star": t_star, "revenue": revenue(t_star, inputs), "units": pol.units, "bounds": bounds})
    run.wrote(
        save_json(result, str(run.out / "policy.json")),
        save_table([{"price": p, "revenue": v} for p, v in zip(prices, values)], str(run.out / "policy_curve.csv")),
    )
    print(f"optimal price {t_star:.4f} (revenue {result['revenue']:.4f})")


def cmd_benchmark(run: Run) -> None:
    cfg, bench = run.cfg, run.cfg.benchmark
    base = dict(cfg.raw.get("dgp") or {})
    scenarios = {"default": cfg.dgp} if not bench.scenarios else {
        name: dgp_from_dict(
            coerce_mapping(DGPSpec, {**base, **over}, f"benchmark.scenarios.{name}"),
            f"benchmark.scenarios.{name}",
        )
        for name, over in bench.scenarios.items()
    }
    rows = run_benchmark(
        scenarios, bench.estimators, np.asarray(bench.test_points, dtype=np.float64).reshape(-1, 1),
        cfg.forest, cfg.final_learner, bench.replicates, cfg.seed, bench.n_boot,
        cfg.bootstrap.level, cfg.dml.folds, run.threads,
    )
    columns = ["scenario", "estimator", "rmse", "bias", "coverage", "wall_time"]
    run.wrote(save_table(rows, str(run.out / "benchmark.csv"), columns))


def _saved_estimates(run: Run, stem: str) -> Optional[List[EffectEstimate]]:
    """``<stem>.json`` when its run manifest carries this run's config hash, else None."""
    path = run.out / f"{stem}.json"
    if not path.exists():
        return None
    manifest_path = run.out / f"manifest-{stem}.json"
    manifest = load_json(str(manifest_path)) if manifest_path.exists() else {}
    if manifest.get("config_sha256") != config_hash(run.cfg.raw) or path.name not in manifest.get("outputs", []):
        log.warning("ignoring %s: written under different settings", path)
        return None
    log.info("plotting %s", path)
    return [
        EffectEstimate(tuple(r["x"]), r["theta"], r["ci_low"], r["ci_high"], r.get("n_effective") or float("nan"))
        for r in load_json(str(path))
    ]


def cmd_plot_data(run: Run) -> None:
    estimates = None
    for stem in ("bootstrap", "effects"):
        estimates = _saved_estimates(run, stem)
        if estimates is not None:
            break
    if estimates is None:
        estimates = run.effects()
    estimates = sorted(estimates, key=lambda e: e.x)
    d = len(estimates[0].x)
    columns = (["x"] if d == 1 else [f"x{j}" for j in range(d)]) + ["theta", "ci_low", "ci_high"]
    xlabel = run.dataset.schema.by_role("target")[0]
    run.wrote(
        save_table(estimate_rows(estimates), str(run.out / "plot.csv"), columns),
        save_effect_chart(estimates, str(run.out / "plot.svg"), xlabel=xlabel),
    )


def cmd_generate(run: Run) -> None:
    dataset, truth = generate(run.cfg.dgp)
    csv_path = run.out / "synthetic.csv"
    schema_path = run.out / "synthetic_schema.yaml"
    write_dataset(dataset, str(csv_path))
    save_schema(dataset.schema, str(schema_path))
    theta = truth.theta(dataset.x)
    truth_rows = [{"row": i, "theta": float(v)} for i, v in enumerate(theta)]
    run.wrote(csv_path, schema_path, save_table(truth_rows, str(run.out / "synthetic_theta.csv")))


def cmd_learners(run: Run) -> None:
    specs = {
        name: LearnerSpec.from_dict(doc, f"comparison.learners.{name}")
        for name, doc in run.cfg.comparison.learners.items()
    }
    rows = compare_learners(run.dataset, specs, run.cfg.comparison.train_fraction, run.cfg.seed)
    run.wrote(save_table(rows, str(run.out / "learners.csv")))


HANDLERS: Dict[str, Callable[[Run], None]] = {
    "fit": cmd_fit,
    "effects": cmd_effects,
    "bootstrap": cmd_bootstrap,
    "dml": cmd_dml,
    "dmliv": cmd_dmliv,
    "policy": cmd_policy,
    "benchmark": cmd_benchmark,
    "plot-data": cmd_plot_data,
    "generate": cmd_generate,
    "learners": cmd_learners,
}


# ── Entry point ──────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_orf.py",
        description="Orthogonal random forest effect estimation, DML/DMLIV and price policy.",
    )
    parser.add_argument("command", choices=COMMANDS, help="what to run")
    parser.add_argument("-c", "--config", default="config.yaml", help="YAML config file (default: config.yaml)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value; repeatable",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker count (default: threads or ORF_THREADS)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 when every artifact was written, 1 on errors.

    Usage errors exit with status 2 through argparse.
    """
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, args.overrides)
        if args.threads is not None:
            cfg.threads = args.threads
        setup_logging(cfg.logging)
        validate_config(cfg, needs_data=args.command not in NO_DATA)
        run = Run(cfg, args.command)
        log.info("%s: seed=%d threads=%d output=%s", args.command, cfg.seed, run.threads, run.out)
        HANDLERS[args.command](run)
        write_manifest(str(run.out), args.command, cfg.raw, cfg.seed, started, run.outputs)
    except (OrthoForestError, FileNotFoundError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1
    log.info("%s done in %.1fs", args.command, time.perf_counter() - started)
    return 0
