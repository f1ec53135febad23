"""Replicate-grid benchmark: generate, train, estimate, aggregate.

One replicate = one synthetic panel, one factor-model training (lazy: only
when the learned-instrument estimator is requested), and one effect series per
requested estimator. The grid runs over sample sizes and autoregressive
orders; per-replicate seeds derive from the master seed and the grid indices
alone, so results are independent of execution order and of how many worker
processes run the grid. Aggregation reports the mean and standard deviation of
the absolute error |beta_hat - truth| over successful replicates, with failed
(replicate, t) cells counted rather than silently dropped.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .datagen import SimConfig, simulate_panel
from .errors import ConfigError, MissingCell, PanelIVError
from .estimate import (
    EffectEstimate,
    EffectSeries,
    EstimatorId,
    EstimatorOptions,
    effect_series,
)
from .factor import TrainConfig, infer_latents, train
from .numkit import RngStream

REPORT_FORMAT = "paneliv-bench-report"
REPORT_VERSION = 1


@dataclass(frozen=True)
class BenchSpec:
    """Grid definition for a benchmark run.

    The defaults are the full evaluation profile (30 replicates over sample
    sizes 2k/4k/6k/8k and autoregressive orders 1 and 3); ``desk_profile``
    gives the reduced profile used by the acceptance suite.
    """

    sample_sizes: tuple[int, ...] = (2000, 4000, 6000, 8000)
    p_orders: tuple[int, ...] = (1, 3)
    replicates: int = 30
    t_report: tuple[int, ...] = (1, 5, 10, 15, 20)
    estimators: tuple[str, ...] = ("naive", "tsls")
    master_seed: int = 0
    t_steps: int = 20
    train_config: TrainConfig = field(default_factory=TrainConfig)
    estimator_options: EstimatorOptions = field(default_factory=lambda: EstimatorOptions(allow_ridge=True))

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not self.sample_sizes:
            raise ConfigError("sample_sizes must be nonempty")
        if not self.p_orders:
            raise ConfigError("p_orders must be nonempty")
        for est in self.estimators:
            EstimatorId(est)  # raises ValueError on unknown ids
        if any(t < 1 or t > self.t_steps for t in self.t_report):
            raise ConfigError("t_report entries must lie in 1..t_steps")

    def snapshot(self) -> dict:
        return {
            "sample_sizes": list(self.sample_sizes),
            "p_orders": list(self.p_orders),
            "replicates": self.replicates,
            "t_report": list(self.t_report),
            "estimators": list(self.estimators),
            "master_seed": self.master_seed,
            "t_steps": self.t_steps,
            "train_config": {
                "epochs": self.train_config.epochs,
                "batch_size": self.train_config.batch_size,
                "hidden_units": self.train_config.hidden_units,
                "learning_rate": self.train_config.learning_rate,
                "keep_probability": self.train_config.keep_probability,
                "latent_dim": self.train_config.latent_dim,
                "seed": self.train_config.seed,
                "fc_units": self.train_config.fc_units,
                "include_treatment_input": self.train_config.include_treatment_input,
                "grad_clip": self.train_config.grad_clip,
                "dtype": self.train_config.dtype,
            },
            "estimator_options": self.estimator_options.as_dict(),
        }


def desk_profile(master_seed: int = 0, **overrides) -> BenchSpec:
    """Reduced profile: 10 replicates, sample sizes 2k and 5k, p = 1."""
    base = dict(
        sample_sizes=(2000, 5000),
        p_orders=(1,),
        replicates=10,
        master_seed=master_seed,
    )
    base.update(overrides)
    return BenchSpec(**base)


def paper_profile(master_seed: int = 0, **overrides) -> BenchSpec:
    """Full evaluation profile: 30 replicates, sizes 2k/4k/6k/8k, p in {1, 3}."""
    base = dict(master_seed=master_seed)
    base.update(overrides)
    return BenchSpec(**base)


def abs_error(estimate: EffectEstimate | float, truth: EffectEstimate | float) -> float:
    """Absolute error |beta_hat - truth| (symmetric in its arguments)."""

    def value(v):
        return float(v.beta_hat) if isinstance(v, EffectEstimate) else float(v)

    a, b = value(estimate), value(truth)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("abs_error requires finite inputs")
    return abs(a - b)


def train_seed_for(master_seed: int, sample_size: int, p: int, replicate: int) -> int:
    """Per-cell training seed, independent of execution order."""
    return RngStream(master_seed).child("train", sample_size, p, replicate).stream_id


@dataclass(frozen=True)
class ReplicateResult:
    sample_size: int
    p: int
    replicate: int
    truth: float
    series: dict[str, EffectSeries]
    estimator_errors: dict[str, str]  # estimator -> replicate-level error message
    train_seed: Optional[int]
    final_train_loss: Optional[float]


def run_replicate(spec: BenchSpec, sample_size: int, p: int, replicate: int) -> ReplicateResult:
    """One grid cell: simulate, (train, infer), estimate across all t."""
    config = SimConfig(
        n_individuals=sample_size,
        p_order=p,
        t_steps=spec.t_steps,
        master_seed=spec.master_seed,
    )
    panel = simulate_panel(config, replicate)

    needs_latents = "tsls" in spec.estimators
    latents = None
    t_seed = None
    final_loss = None
    series: dict[str, EffectSeries] = {}
    errors: dict[str, str] = {}

    if needs_latents:
        t_seed = train_seed_for(spec.master_seed, sample_size, p, replicate)
        try:
            result = train(panel.observed, replace(spec.train_config, seed=t_seed))
            final_loss = float(result.loss_curve[-1])
            latents = infer_latents(result.params, panel.observed)
        except PanelIVError as exc:
            errors["tsls"] = f"{type(exc).__name__}: {exc}"

    for name in spec.estimators:
        if name == "tsls" and latents is None:
            continue  # training failed; already recorded
        try:
            series[name] = effect_series(
                panel.observed,
                latents if name == "tsls" else None,
                name,
                spec.estimator_options,
            )
        except PanelIVError as exc:
            errors[name] = f"{type(exc).__name__}: {exc}"

    return ReplicateResult(
        sample_size=sample_size,
        p=p,
        replicate=replicate,
        truth=panel.true_effect,
        series=series,
        estimator_errors=errors,
        train_seed=t_seed,
        final_train_loss=final_loss,
    )


def _replicate_task(args: tuple) -> ReplicateResult:
    spec, sample_size, p, replicate = args
    return run_replicate(spec, sample_size, p, replicate)


@dataclass(frozen=True)
class CellStats:
    mean_abs_error: Optional[float]
    std_abs_error: Optional[float]
    n_ok: int
    n_failed: int
    n_ridge: int


@dataclass(frozen=True)
class BenchReport:
    spec: dict
    code_version: str
    cells: dict[tuple[int, int, str, int], CellStats]
    rows: tuple[dict, ...]
    replicate_failures: tuple[dict, ...]
    seeds: tuple[dict, ...]

    def cell(self, sample_size: int, p: int, estimator: str, t: int) -> CellStats:
        key = (sample_size, p, estimator, t)
        if key not in self.cells:
            raise MissingCell(f"no cell for sample_size={sample_size}, p={p}, "
                              f"estimator={estimator}, t={t}")
        return self.cells[key]

    def to_json_bytes(self) -> bytes:
        doc = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "spec": self.spec,
            "code_version": self.code_version,
            "cells": [
                {
                    "sample_size": k[0],
                    "p": k[1],
                    "estimator": k[2],
                    "t": k[3],
                    "mean_abs_error": v.mean_abs_error,
                    "std_abs_error": v.std_abs_error,
                    "n_ok": v.n_ok,
                    "n_failed": v.n_failed,
                    "n_ridge": v.n_ridge,
                }
                for k, v in sorted(self.cells.items())
            ],
            "rows": list(self.rows),
            "replicate_failures": list(self.replicate_failures),
            "seeds": list(self.seeds),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def to_csv_text(self) -> str:
        """Flat per-replicate rows, one line per (cell, replicate)."""
        header = (
            "sample_size,p,estimator,t,replicate,abs_error,beta_hat,std_error,"
            "first_stage_stat,used_ridge,error_code"
        )
        lines = [header]
        for row in self.rows:
            lines.append(
                ",".join(
                    _csv_field(row[k])
                    for k in (
                        "sample_size", "p", "estimator", "t", "replicate", "abs_error",
                        "beta_hat", "std_error", "first_stage_stat", "used_ridge",
                        "error_code",
                    )
                )
            )
        return "\n".join(lines) + "\n"


def _csv_field(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_from_json_bytes(data: bytes) -> BenchReport:
    doc = json.loads(data.decode("utf-8"))
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError("not a benchmark report")
    cells = {}
    for rec in doc["cells"]:
        key = (rec["sample_size"], rec["p"], rec["estimator"], rec["t"])
        cells[key] = CellStats(
            mean_abs_error=rec["mean_abs_error"],
            std_abs_error=rec["std_abs_error"],
            n_ok=rec["n_ok"],
            n_failed=rec["n_failed"],
            n_ridge=rec["n_ridge"],
        )
    return BenchReport(
        spec=doc["spec"],
        code_version=doc["code_version"],
        cells=cells,
        rows=tuple(doc["rows"]),
        replicate_failures=tuple(doc["replicate_failures"]),
        seeds=tuple(doc["seeds"]),
    )


def _crash_result(spec: BenchSpec, sample_size: int, p: int, replicate: int, exc: BaseException) -> ReplicateResult:
    message = f"TaskCrash: {type(exc).__name__}: {exc}"
    return ReplicateResult(
        sample_size=sample_size,
        p=p,
        replicate=replicate,
        truth=float("nan"),
        series={},
        estimator_errors={name: message for name in spec.estimators},
        train_seed=None,
        final_train_loss=None,
    )


def run_benchmark(spec: BenchSpec, threads: int = 1, log=None) -> BenchReport:
    """Run the whole grid; the report is identical for any ``threads`` value.

    Crashed replicates are folded into the report as failures rather than
    aborting the run, so a partial report is always produced.
    """
    tasks = [
        (spec, size, p, rep)
        for size in spec.sample_sizes
        for p in spec.p_orders
        for rep in range(spec.replicates)
    ]
    results = []
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_replicate_task, task) for task in tasks]
            for task, future in zip(tasks, futures):
                try:
                    results.append(future.result())
                except Exception as exc:  # worker crash: record, keep going
                    results.append(_crash_result(spec, task[1], task[2], task[3], exc))
                if log is not None:
                    log(f"replicate done: size={task[1]} p={task[2]} rep={task[3]}")
    else:
        for task in tasks:
            try:
                results.append(_replicate_task(task))
            except Exception as exc:
                results.append(_crash_result(spec, task[1], task[2], task[3], exc))
            if log is not None:
                log(f"replicate done: size={task[1]} p={task[2]} rep={task[3]}")

    return aggregate_results(spec, results)


def aggregate_results(spec: BenchSpec, results: list[ReplicateResult]) -> BenchReport:
    """Deterministic fold over replicate results in grid order."""
    results = sorted(results, key=lambda r: (r.sample_size, r.p, r.replicate))
    rows: list[dict] = []
    replicate_failures: list[dict] = []
    seeds: list[dict] = []
    errors: dict[tuple[int, int, str, int], list[float]] = {}
    ridge_counts: dict[tuple[int, int, str, int], int] = {}

    all_t = range(1, spec.t_steps + 1)
    for res in results:
        seeds.append(
            {
                "sample_size": res.sample_size,
                "p": res.p,
                "replicate": res.replicate,
                "train_seed": res.train_seed,
            }
        )
        for est_name, message in res.estimator_errors.items():
            replicate_failures.append(
                {
                    "sample_size": res.sample_size,
                    "p": res.p,
                    "replicate": res.replicate,
                    "estimator": est_name,
                    "error": message,
                }
            )
        for est_name in spec.estimators:
            series = res.series.get(est_name)
            for t in all_t:
                key = (res.sample_size, res.p, est_name, t)
                est = series.estimate_at(t) if series is not None else None
                if est is not None:
                    err = abs_error(est, res.truth)
                    errors.setdefault(key, []).append(err)
                    used_ridge = bool(est.diagnostics.get("used_ridge", False))
                    if used_ridge:
                        ridge_counts[key] = ridge_counts.get(key, 0) + 1
                    rows.append(
                        {
                            "sample_size": res.sample_size,
                            "p": res.p,
                            "estimator": est_name,
                            "t": t,
                            "replicate": res.replicate,
                            "abs_error": err,
                            "beta_hat": est.beta_hat,
                            "std_error": est.std_error,
                            "first_stage_stat": est.diagnostics.get("first_stage_stat"),
                            "used_ridge": used_ridge,
                            "error_code": None,
                        }
                    )
                else:
                    code = "ReplicateFailure"
                    if series is not None:
                        for failure in series.failures:
                            if failure.t == t:
                                code = failure.error_code
                                break
                    rows.append(
                        {
                            "sample_size": res.sample_size,
                            "p": res.p,
                            "estimator": est_name,
                            "t": t,
                            "replicate": res.replicate,
                            "abs_error": None,
                            "beta_hat": None,
                            "std_error": None,
                            "first_stage_stat": None,
                            "used_ridge": None,
                            "error_code": code,
                        }
                    )

    cells: dict[tuple[int, int, str, int], CellStats] = {}
    for size in spec.sample_sizes:
        for p in spec.p_orders:
            for est_name in spec.estimators:
                for t in all_t:
                    key = (size, p, est_name, t)
                    errs = errors.get(key, [])
                    n_ok = len(errs)
                    if n_ok:
                        mean = float(np.mean(errs))
                        std = float(np.std(errs, ddof=1)) if n_ok > 1 else 0.0
                    else:
                        mean = None
                        std = None
                    cells[key] = CellStats(
                        mean_abs_error=mean,
                        std_abs_error=std,
                        n_ok=n_ok,
                        n_failed=spec.replicates - n_ok,
                        n_ridge=ridge_counts.get(key, 0),
                    )

    return BenchReport(
        spec=spec.snapshot(),
        code_version=__version__,
        cells=cells,
        rows=tuple(rows),
        replicate_failures=tuple(replicate_failures),
        seeds=tuple(seeds),
    )


@dataclass(frozen=True)
class SensitivityRow:
    p: int
    estimator: str
    values: tuple[Optional[tuple[float, float]], ...]  # (mean, std) per t column


@dataclass(frozen=True)
class SensitivityTable:
    """Baseline-vs-learned-instrument comparison in the sensitivity layout."""

    sample_size: int
    t_values: tuple[int, ...]
    rows: tuple[SensitivityRow, ...]

    def to_text(self) -> str:
        headers = [""] * 2 + [f"time-step-{t}" for t in self.t_values]
        lines = ["  ".join(f"{h:>14}" for h in headers)]
        for row in self.rows:
            cells = [f"p = {row.p}", row.estimator]
            for v in row.values:
                cells.append("--" if v is None else f"{v[0]:.3f}±{v[1]:.3f}")
            lines.append("  ".join(f"{c:>14}" for c in cells))
        return "\n".join(lines)

    def to_csv_text(self) -> str:
        lines = ["p,estimator,t,mean_abs_error,std_abs_error"]
        for row in self.rows:
            for t, v in zip(self.t_values, row.values):
                mean = "" if v is None else repr(v[0])
                std = "" if v is None else repr(v[1])
                lines.append(f"{row.p},{row.estimator},{t},{mean},{std}")
        return "\n".join(lines) + "\n"


def sensitivity_table_from_csv_text(text: str) -> SensitivityTable:
    lines = [line for line in text.strip().splitlines()]
    body = lines[1:]
    by_row: dict[tuple[int, str], dict[int, Optional[tuple[float, float]]]] = {}
    t_values: list[int] = []
    for line in body:
        p_s, est, t_s, mean_s, std_s = line.split(",")
        p, t = int(p_s), int(t_s)
        if t not in t_values:
            t_values.append(t)
        value = None if mean_s == "" else (float(mean_s), float(std_s))
        by_row.setdefault((p, est), {})[t] = value
    rows = tuple(
        SensitivityRow(p=p, estimator=est, values=tuple(vals[t] for t in t_values))
        for (p, est), vals in by_row.items()
    )
    return SensitivityTable(sample_size=0, t_values=tuple(t_values), rows=rows)


def sensitivity_table(
    report: BenchReport,
    p_values: tuple[int, ...],
    sample_size: Optional[int] = None,
    estimators: tuple[str, ...] = ("naive", "tsls"),
) -> SensitivityTable:
    """Assemble the sensitivity comparison from report cells.

    Raises :class:`MissingCell` when a requested (p, estimator, t) cell is not
    part of the report grid. Cells present in the grid but with zero
    successful replicates render as gaps.
    """
    sizes = report.spec["sample_sizes"]
    if sample_size is None:
        sample_size = 5000 if 5000 in sizes else max(sizes)
    t_values = tuple(report.spec["t_report"])
    rows = []
    for p in p_values:
        for est_name in estimators:
            values = []
            for t in t_values:
                stats = report.cell(sample_size, p, est_name, t)
                if stats.n_ok == 0:
                    values.append(None)
                else:
                    values.append((stats.mean_abs_error, stats.std_abs_error))
            rows.append(SensitivityRow(p=p, estimator=est_name, values=tuple(values)))
    return SensitivityTable(
        sample_size=sample_size, t_values=t_values, rows=tuple(rows)
    )
