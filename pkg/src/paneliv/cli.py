"""Command-line front end: simulate, train, estimate, benchmark, case-study, report.

Configuration precedence is built-in defaults < ``--config`` JSON file <
explicit flags. stdout carries human-readable summaries only; machine-readable
artifacts are written to files. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, bench, ingest
from .datagen import SimConfig, simulate_panel
from .errors import ConfigError, PanelIVError
from .estimate import EstimatorId, EstimatorOptions, effect_series
from .factor import TrainConfig, infer_latents, load_checkpoint, save_checkpoint, train


class UsageError(Exception):
    """Invalid flag or configuration value; exits with code 2."""


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("--config: top-level JSON value must be an object")
    return doc


def _resolve(args, config_doc: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config_doc:
        return config_doc[key]
    return default


def _parse_estimators(raw: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in raw.split(",") if s.strip())
    if not names:
        raise UsageError("--estimators: at least one estimator required")
    for name in names:
        try:
            EstimatorId(name)
        except ValueError:
            valid = ", ".join(e.value for e in EstimatorId)
            raise UsageError(f"--estimators: unknown estimator {name!r} (valid: {valid})") from None
    return names


def _train_config(args, config_doc: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=_resolve(args, config_doc, "epochs", 100),
            batch_size=_resolve(args, config_doc, "batch_size", 128),
            hidden_units=_resolve(args, config_doc, "hidden", 128),
            learning_rate=_resolve(args, config_doc, "learning_rate", 1e-3),
            keep_probability=_resolve(args, config_doc, "keep_prob", 0.8),
            latent_dim=_resolve(args, config_doc, "latent_dim", 1),
            seed=_resolve(args, config_doc, "seed", 0),
            fc_units=_resolve(args, config_doc, "fc_units", 0),
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _sim_config(args, config_doc: dict) -> SimConfig:
    n = _resolve(args, config_doc, "n", 2000)
    t = _resolve(args, config_doc, "t", 20)
    p = _resolve(args, config_doc, "p", 1)
    seed = _resolve(args, config_doc, "seed", 0)
    if p < 1:
        raise UsageError("--p: p_order must be >= 1")
    if t < p:
        raise UsageError("--t: t_steps must be >= p_order")
    if n < 1:
        raise UsageError("--n: n_individuals must be >= 1")
    try:
        return SimConfig(n_individuals=n, p_order=p, t_steps=t, master_seed=seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _sidecar_path(csv_path: str) -> Path:
    path = Path(csv_path)
    return path.with_suffix(path.suffix + ".truth.json") if path.suffix != ".csv" else path.with_suffix(".truth.json")


def _schema_for_input(args, input_csv: str):
    """Schema from --schema, falling back to the simulate sidecar."""
    if getattr(args, "schema", None):
        try:
            return ingest.load_schema_file(args.schema)
        except FileNotFoundError:
            raise UsageError(f"--schema: file not found: {args.schema}") from None
    sidecar = _sidecar_path(input_csv)
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return ingest.schema_from_json(doc["schema"])
    raise UsageError(f"--schema required (no sidecar found at {sidecar})")


def _coefficients_doc(coefficients) -> dict:
    return {
        "alpha": list(map(float, coefficients.alpha)),
        "lambda": list(map(float, coefficients.lambda_)),
        "delta": list(map(float, coefficients.delta)),
        "omega": list(map(float, coefficients.omega)),
        "beta": list(map(float, coefficients.beta)),
        "gamma": list(map(float, coefficients.gamma)),
        "mu_x": float(coefficients.mu_x),
        "mu_u": float(coefficients.mu_u),
        "mu_s": float(coefficients.mu_s),
        "c": float(coefficients.c),
    }


def cmd_simulate(args) -> int:
    config_doc = _load_config_file(args.config)
    sim = _sim_config(args, config_doc)
    replicate = _resolve(args, config_doc, "replicate", 0)
    out_csv = Path(_resolve(args, config_doc, "out", "panel.csv"))

    panel = simulate_panel(sim, replicate)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    schema = ingest.write_panel_csv(panel.observed, out_csv)
    sidecar = {
        "format": "paneliv-panel-sidecar",
        "version": 1,
        "code_version": __version__,
        "true_effect": panel.true_effect,
        "replicate": replicate,
        "config": asdict(sim),
        "coefficients": _coefficients_doc(panel.coefficients),
        "schema": ingest.schema_to_json(schema),
    }
    with open(_sidecar_path(str(out_csv)), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"wrote panel: n={panel.observed.n} t_steps={panel.observed.t_steps} "
        f"k={panel.observed.k} true_effect={panel.true_effect} -> {out_csv}"
    )
    return 0


def cmd_train(args) -> int:
    config_doc = _load_config_file(args.config)
    schema, _ = _schema_for_input(args, args.input_csv)
    panel, _report = ingest.load_panel(args.input_csv, schema)
    tc = _train_config(args, config_doc)
    result = train(panel, tc)
    out = Path(_resolve(args, config_doc, "out", "factor_checkpoint.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out)
    print(
        f"trained factor model on n={panel.n} individuals, t_steps={panel.t_steps}: "
        f"loss {result.loss_curve[0]:.4f} -> {result.loss_curve[-1]:.4f} "
        f"over {tc.epochs} epochs -> {out}"
    )
    return 0


def cmd_estimate(args) -> int:
    config_doc = _load_config_file(args.config)
    schema, _ = _schema_for_input(args, args.input_csv)
    panel, _report = ingest.load_panel(args.input_csv, schema)
    estimators = _parse_estimators(_resolve(args, config_doc, "estimators", "naive"))
    out_dir = Path(_resolve(args, config_doc, "out", "estimates"))
    out_dir.mkdir(parents=True, exist_ok=True)

    latents = None
    if "tsls" in estimators:
        model_path = _resolve(args, config_doc, "model", None)
        if model_path is None:
            raise UsageError("--model: required when tsls is requested")
        params = load_checkpoint(model_path)
        latents = infer_latents(params, panel)

    options = EstimatorOptions(allow_ridge=True)
    for name in estimators:
        series = effect_series(panel, latents if name == "tsls" else None, name, options)
        path = out_dir / f"effects_{name}.csv"
        ingest.write_effect_series_csv(series, path)
        betas = [est.beta_hat for est in series.estimates]
        mean = float(np.mean(betas)) if betas else float("nan")
        print(
            f"{name}: {len(series.estimates)} estimates, {len(series.failures)} gaps, "
            f"mean beta_hat {mean:.4f} -> {path}"
        )
    return 0


def _bench_spec(args, config_doc: dict) -> tuple[bench.BenchSpec, int]:
    profile = _resolve(args, config_doc, "profile", "desk")
    if profile not in ("desk", "paper"):
        raise UsageError("--profile: must be 'desk' or 'paper'")
    seed = _resolve(args, config_doc, "seed", 0)
    tc = _train_config(args, config_doc)

    overrides: dict = {"train_config": tc}
    sizes = _resolve(args, config_doc, "n", None)
    if sizes is not None:
        overrides["sample_sizes"] = _parse_int_list(sizes, "--n")
    p_orders = _resolve(args, config_doc, "p", None)
    if p_orders is not None:
        parsed_p = _parse_int_list(p_orders, "--p")
        if any(p < 1 for p in parsed_p):
            raise UsageError("--p: p_order must be >= 1")
        overrides["p_orders"] = parsed_p
    replicates = _resolve(args, config_doc, "replicates", None)
    if replicates is not None:
        overrides["replicates"] = replicates
    t_steps = _resolve(args, config_doc, "t", None)
    if t_steps is not None:
        overrides["t_steps"] = t_steps
    estimators = _resolve(args, config_doc, "estimators", None)
    if estimators is not None:
        overrides["estimators"] = _parse_estimators(estimators)

    try:
        spec = (
            bench.desk_profile(seed, **overrides)
            if profile == "desk"
            else bench.paper_profile(seed, **overrides)
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    threads = _resolve(args, config_doc, "threads", os.cpu_count() or 1)
    if threads < 1:
        raise UsageError("--threads: must be >= 1")
    return spec, threads


def _parse_int_list(raw, flag: str) -> tuple[int, ...]:
    if isinstance(raw, int):
        return (raw,)
    if isinstance(raw, (list, tuple)):
        return tuple(int(v) for v in raw)
    try:
        return tuple(int(s.strip()) for s in str(raw).split(",") if s.strip())
    except ValueError:
        raise UsageError(f"{flag}: expected an integer or comma-separated integers") from None


def cmd_benchmark(args) -> int:
    config_doc = _load_config_file(args.config)
    spec, threads = _bench_spec(args, config_doc)
    out_dir = Path(_resolve(args, config_doc, "out", "bench_out"))

    if args.dry_run:
        print(json.dumps(spec.snapshot(), indent=2, sort_keys=True))
        return 0

    out_dir.mkdir(parents=True, exist_ok=True)
    report = bench.run_benchmark(spec, threads=threads, log=_log)
    (out_dir / "report.json").write_bytes(report.to_json_bytes())
    (out_dir / "report.csv").write_text(report.to_csv_text(), encoding="utf-8")

    table = bench.sensitivity_table(
        report, p_values=tuple(spec.p_orders), estimators=tuple(spec.estimators)
    )
    (out_dir / "table.csv").write_text(table.to_csv_text(), encoding="utf-8")
    print(f"benchmark complete: {len(spec.sample_sizes) * len(spec.p_orders) * spec.replicates} "
          f"replicates -> {out_dir}")
    print(f"mean absolute error, sample size {table.sample_size}:")
    print(table.to_text())

    crashed = any(
        str(f.get("error", "")).startswith("TaskCrash") for f in report.replicate_failures
    )
    return 1 if crashed else 0


def cmd_case_study(args) -> int:
    config_doc = _load_config_file(args.config)
    schema_path = _resolve(args, config_doc, "schema", None)
    if schema_path is None:
        raise UsageError("--schema: required for case-study")
    try:
        schema, treatments = ingest.load_schema_file(schema_path)
    except FileNotFoundError:
        raise UsageError(f"--schema: file not found: {schema_path}") from None
    except (KeyError, ConfigError) as exc:
        raise UsageError(f"--schema: invalid schema file: {exc}") from None

    tc = _train_config(args, config_doc)
    out_dir = Path(_resolve(args, config_doc, "out", "case_study"))
    out_dir.mkdir(parents=True, exist_ok=True)

    meta = {
        "code_version": __version__,
        "schema": ingest.schema_to_json(schema, treatments),
        "train_config": asdict(tc),
        "input": str(args.input_csv),
    }
    try:
        result = ingest.case_study_run(args.input_csv, schema, tc, treatments)
    except PanelIVError as exc:
        meta["error"] = f"{type(exc).__name__}: {exc}"
        with open(out_dir / "case_study_meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        print(f"case study failed: {meta['error']}", file=sys.stderr)
        return 1

    meta["ingest_reports"] = {
        name: report.to_json() for name, report in result.reports_by_treatment.items()
    }
    with open(out_dir / "case_study_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    for name, series in result.series_by_treatment.items():
        path = out_dir / f"effects_{name}.csv"
        ingest.write_effect_series_csv(series, path)
        print(f"treatment {name}: {len(series.estimates)} estimates, "
              f"{len(series.failures)} gaps -> {path}")
    return 0


def cmd_report(args) -> int:
    config_doc = _load_config_file(args.config)
    try:
        data = Path(args.report_json).read_bytes()
    except FileNotFoundError:
        raise UsageError(f"report file not found: {args.report_json}") from None
    report = bench.report_from_json_bytes(data)
    p_values = tuple(report.spec["p_orders"])
    estimators = tuple(report.spec["estimators"])
    size = _resolve(args, config_doc, "n", None)
    table = bench.sensitivity_table(
        report, p_values=p_values, sample_size=size, estimators=estimators
    )
    out = _resolve(args, config_doc, "out", None)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(table.to_csv_text(), encoding="utf-8")
    print(f"mean absolute error, sample size {table.sample_size}:")
    print(table.to_text())
    return 0


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--hidden", type=int, default=None)
    parser.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    parser.add_argument("--keep-prob", dest="keep_prob", type=float, default=None)
    parser.add_argument("--fc-units", dest="fc_units", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paneliv",
        description="Time-varying causal effects from longitudinal panels with "
        "latent confounders.",
    )
    parser.add_argument("--version", action="version", version=f"paneliv {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic panel CSV + truth sidecar")
    p_sim.add_argument("--n", type=int, default=None)
    p_sim.add_argument("--t", type=int, default=None)
    p_sim.add_argument("--p", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--replicate", type=int, default=None)
    p_sim.add_argument("--out", type=str, default=None)
    p_sim.add_argument("--config", type=str, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train the factor model on a panel CSV")
    p_train.add_argument("input_csv", type=str)
    p_train.add_argument("--schema", type=str, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    _add_train_flags(p_train)
    p_train.add_argument("--out", type=str, default=None)
    p_train.add_argument("--config", type=str, default=None)
    p_train.set_defaults(func=cmd_train)

    p_est = sub.add_parser("estimate", help="run effect estimators over a panel CSV")
    p_est.add_argument("input_csv", type=str)
    p_est.add_argument("--schema", type=str, default=None)
    p_est.add_argument("--estimators", type=str, default=None)
    p_est.add_argument("--model", type=str, default=None)
    p_est.add_argument("--out", type=str, default=None)
    p_est.add_argument("--config", type=str, default=None)
    p_est.set_defaults(func=cmd_estimate)

    p_bench = sub.add_parser("benchmark", help="run the replicate-grid benchmark")
    p_bench.add_argument("--profile", type=str, default=None, choices=None)
    p_bench.add_argument("--n", type=str, default=None,
                         help="sample sizes, comma separated")
    p_bench.add_argument("--p", type=str, default=None,
                         help="autoregressive orders, comma separated")
    p_bench.add_argument("--t", type=int, default=None)
    p_bench.add_argument("--replicates", type=int, default=None)
    p_bench.add_argument("--estimators", type=str, default=None)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--threads", type=int, default=None)
    _add_train_flags(p_bench)
    p_bench.add_argument("--out", type=str, default=None)
    p_bench.add_argument("--config", type=str, default=None)
    p_bench.add_argument("--dry-run", dest="dry_run", action="store_true")
    p_bench.set_defaults(func=cmd_benchmark)

    p_case = sub.add_parser("case-study", help="per-treatment effect series from a real CSV")
    p_case.add_argument("input_csv", type=str)
    p_case.add_argument("--schema", type=str, default=None)
    p_case.add_argument("--seed", type=int, default=None)
    _add_train_flags(p_case)
    p_case.add_argument("--out", type=str, default=None)
    p_case.add_argument("--config", type=str, default=None)
    p_case.set_defaults(func=cmd_case_study)

    p_rep = sub.add_parser("report", help="format a benchmark report")
    p_rep.add_argument("report_json", type=str)
    p_rep.add_argument("--n", type=int, default=None)
    p_rep.add_argument("--out", type=str, default=None)
    p_rep.add_argument("--config", type=str, default=None)
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PanelIVError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
