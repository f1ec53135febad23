"""CSV ingestion of longitudinal panels, plus the matching export format.

Input files are UTF-8 CSV in long format: one row per (individual, time),
with a header row. Rows are grouped by individual and sorted by time; the
panel must be rectangular (every kept individual covers the same complete
time grid). Continuous treatments can be binarized by a median split or a
fixed threshold, computed once over all kept rows of the column, never
per-individual.

Outcome alignment: by default the stored outcome at step t is the raw outcome
column at time t+1 (so the panel loses its last time step). Exported
synthetic panels already store next-step outcomes; their sidecar schemas set
``outcome_already_lead`` so a round trip reproduces the panel exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .datagen import TrajectoryPanel
from .errors import (
    AllMissingColumn,
    ConfigError,
    MissingColumn,
    RaggedPanel,
    UnparseableValue,
)
from .estimate import EffectSeries, EstimatorOptions, effect_series
from .factor import TrainConfig, infer_latents, train

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class Binarization:
    kind: str  # "none" | "median_split" | "threshold"
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("none", "median_split", "threshold"):
            raise ConfigError(f"unknown binarization kind {self.kind!r}")
        if self.kind == "threshold" and self.value is None:
            raise ConfigError("threshold binarization requires a value")

    @staticmethod
    def from_json(obj) -> "Binarization":
        if isinstance(obj, str):
            return Binarization(kind=obj)
        if isinstance(obj, dict) and "threshold" in obj:
            return Binarization(kind="threshold", value=float(obj["threshold"]))
        raise ConfigError(f"cannot parse binarization spec {obj!r}")

    def to_json(self):
        if self.kind == "threshold":
            return {"threshold": self.value}
        return self.kind


@dataclass(frozen=True)
class PanelSchema:
    """Column roles for a long-format panel CSV."""

    time_column: str
    treatment_column: str
    outcome_column: str
    covariate_columns: tuple[str, ...]
    id_column: Optional[str] = None  # absent: the file is one individual's series
    treatment_binarization: Binarization = Binarization(kind="none")
    outcome_already_lead: bool = False

    def __post_init__(self):
        if not self.covariate_columns:
            raise ConfigError("covariate_columns must be nonempty")
        names = [self.time_column, self.treatment_column, self.outcome_column]
        names += list(self.covariate_columns)
        if self.id_column is not None:
            names.append(self.id_column)
        if len(set(names)) != len(names):
            raise ConfigError("schema column names must be distinct")

    def required_columns(self) -> list[str]:
        cols = [self.time_column, self.treatment_column, self.outcome_column]
        cols += list(self.covariate_columns)
        if self.id_column is not None:
            cols.append(self.id_column)
        return cols


def schema_from_json(doc: dict) -> tuple[PanelSchema, tuple[str, ...]]:
    """Parse a schema document; returns (schema, case-study treatment list).

    ``treatment_column`` may be a list of columns, in which case the first is
    the schema's primary treatment and the full list drives the case-study
    workflow (one effect series per listed treatment).
    """
    tc = doc["treatment_column"]
    treatments = tuple(tc) if isinstance(tc, list) else (tc,)
    if not treatments:
        raise ConfigError("treatment_column must name at least one column")
    schema = PanelSchema(
        time_column=doc["time_column"],
        treatment_column=treatments[0],
        outcome_column=doc["outcome_column"],
        covariate_columns=tuple(doc["covariate_columns"]),
        id_column=doc.get("id_column"),
        treatment_binarization=Binarization.from_json(
            doc.get("treatment_binarization", "none")
        ),
        outcome_already_lead=bool(doc.get("outcome_already_lead", False)),
    )
    return schema, treatments


def schema_to_json(schema: PanelSchema, treatments: Optional[tuple[str, ...]] = None) -> dict:
    return {
        "time_column": schema.time_column,
        "treatment_column": list(treatments) if treatments else schema.treatment_column,
        "outcome_column": schema.outcome_column,
        "covariate_columns": list(schema.covariate_columns),
        "id_column": schema.id_column,
        "treatment_binarization": schema.treatment_binarization.to_json(),
        "outcome_already_lead": schema.outcome_already_lead,
    }


@dataclass(frozen=True)
class IngestReport:
    rows_read: int
    rows_kept: int
    rows_dropped: int
    individuals_read: int
    individuals: int
    individuals_dropped: int
    t_steps: int
    missing_by_column: dict[str, int]
    binarization: dict

    def __post_init__(self):
        if self.rows_read != self.rows_kept + self.rows_dropped:
            raise ValueError("rows_read must equal rows_kept + rows_dropped")

    def to_json(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "individuals_read": self.individuals_read,
            "individuals": self.individuals,
            "individuals_dropped": self.individuals_dropped,
            "t_steps": self.t_steps,
            "missing_by_column": self.missing_by_column,
            "binarization": self.binarization,
        }


def _parse_cell(raw: str, row_index: int, column: str) -> Optional[float]:
    token = raw.strip()
    if token.lower() in _MISSING_TOKENS:
        return None
    try:
        value = float(token)
    except ValueError:
        raise UnparseableValue(row_index, column, raw) from None
    if not np.isfinite(value):
        return None  # parseable NaN/inf markers count as missing
    return value


def _time_sort_key(values: set[str]):
    try:
        parsed = {v: float(v) for v in values}
        return lambda v: parsed[v]
    except ValueError:
        return lambda v: v


def load_panel(path, schema: PanelSchema) -> tuple[TrajectoryPanel, IngestReport]:
    """Load a long-format CSV into a rectangular trajectory panel.

    Rows with missing required fields are dropped; individuals left with an
    incomplete time grid by those drops are dropped entirely (both counted in
    the report). Individuals whose raw rows do not cover the common grid in
    the first place make the file structurally ragged: that raises
    :class:`RaggedPanel`.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingColumn("file has no header row")
        header = list(reader.fieldnames)
        for col in schema.required_columns():
            if col not in header:
                raise MissingColumn(f"column {col!r} not in header {header}")
        raw_rows = list(reader)

    rows_read = len(raw_rows)
    missing_by_column = {col: 0 for col in schema.required_columns()}
    value_cols = [schema.treatment_column, schema.outcome_column] + list(
        schema.covariate_columns
    )

    # Parse and apply the missing-row policy.
    kept: list[tuple[str, str, dict[str, float]]] = []  # (id, time, values)
    dropped_rows_by_id: dict[str, int] = {}
    rows_dropped = 0
    treatment_raw: list[float] = []  # full-column values for binarization
    for i, row in enumerate(raw_rows, start=2):  # data starts on file line 2
        ind = row[schema.id_column].strip() if schema.id_column else "0"
        time_raw = row[schema.time_column].strip()
        values = {}
        row_missing = False
        if time_raw.lower() in _MISSING_TOKENS:
            missing_by_column[schema.time_column] += 1
            row_missing = True
        for col in value_cols:
            parsed = _parse_cell(row[col], i, col)
            if parsed is None:
                missing_by_column[col] += 1
                row_missing = True
            else:
                values[col] = parsed
        if row_missing:
            rows_dropped += 1
            dropped_rows_by_id[ind] = dropped_rows_by_id.get(ind, 0) + 1
            continue
        treatment_raw.append(values[schema.treatment_column])
        kept.append((ind, time_raw, values))

    for col in value_cols:
        if missing_by_column[col] == rows_read and rows_read > 0:
            raise AllMissingColumn(f"column {col!r} has no usable values")
    if not kept:
        raise AllMissingColumn("no rows left after dropping missing values")

    # Common time grid over all kept rows.
    time_values = {time_raw for _, time_raw, _ in kept}
    sort_key = _time_sort_key(time_values)
    grid = sorted(time_values, key=sort_key)
    time_index = {v: i for i, v in enumerate(grid)}
    t_raw = len(grid)

    by_individual: dict[str, dict[int, dict[str, float]]] = {}
    for ind, time_raw, values in kept:
        slot = by_individual.setdefault(ind, {})
        ti = time_index[time_raw]
        if ti in slot:
            raise RaggedPanel(f"duplicate time {time_raw!r} for individual {ind!r}")
        slot[ti] = values

    individuals_read = len(set(by_individual) | set(dropped_rows_by_id))
    complete_ids = []
    rows_dropped_incomplete = 0
    for ind in sorted(by_individual):
        slot = by_individual[ind]
        if len(slot) == t_raw:
            complete_ids.append(ind)
        elif dropped_rows_by_id.get(ind, 0) > 0:
            rows_dropped_incomplete += len(slot)  # dropped with its remaining rows
        else:
            raise RaggedPanel(
                f"individual {ind!r} covers {len(slot)} of {t_raw} time steps"
            )
    if not complete_ids:
        raise RaggedPanel("no individual covers the complete time grid")

    # Binarization threshold computed once over the full parsed column.
    bin_spec = schema.treatment_binarization
    threshold = None
    if bin_spec.kind == "median_split":
        threshold = float(np.median(treatment_raw))
    elif bin_spec.kind == "threshold":
        threshold = float(bin_spec.value)

    k = len(schema.covariate_columns)
    n = len(complete_ids)
    t_panel = t_raw if schema.outcome_already_lead else t_raw - 1
    if t_panel < 1:
        raise RaggedPanel("need at least two time steps for lead-by-one alignment")

    covariates = np.zeros((n, t_panel, k))
    treatments = np.zeros((n, t_panel))
    outcomes = np.zeros((n, t_panel))
    for row_i, ind in enumerate(complete_ids):
        slot = by_individual[ind]
        for ti in range(t_panel):
            values = slot[ti]
            for kj, col in enumerate(schema.covariate_columns):
                covariates[row_i, ti, kj] = values[col]
            raw_w = values[schema.treatment_column]
            treatments[row_i, ti] = (
                float(raw_w > threshold) if threshold is not None else raw_w
            )
            if schema.outcome_already_lead:
                outcomes[row_i, ti] = values[schema.outcome_column]
            else:
                outcomes[row_i, ti] = slot[ti + 1][schema.outcome_column]

    panel = TrajectoryPanel(covariates=covariates, treatments=treatments, outcomes=outcomes)
    ones_share = float(np.mean(treatments)) if treatments.size else 0.0
    report = IngestReport(
        rows_read=rows_read,
        rows_kept=rows_read - rows_dropped - rows_dropped_incomplete,
        rows_dropped=rows_dropped + rows_dropped_incomplete,
        individuals_read=individuals_read,
        individuals=n,
        individuals_dropped=individuals_read - n,
        t_steps=t_panel,
        missing_by_column=missing_by_column,
        binarization={
            "kind": bin_spec.kind,
            "threshold": threshold,
            "treated_share": ones_share,
        },
    )
    return panel, report


def write_panel_csv(panel: TrajectoryPanel, path) -> PanelSchema:
    """Export a panel in the long format; returns the schema that reloads it.

    Floats are written with shortest round-trip precision, so loading the file
    back yields a bit-identical panel.
    """
    schema = export_schema(panel.k)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["id", "time"] + [f"x{j + 1}" for j in range(panel.k)] + ["w", "y"]
        )
        for i in range(panel.n):
            for t in range(panel.t_steps):
                row = [str(i), str(t + 1)]
                row += [repr(float(v)) for v in panel.covariates[i, t]]
                row.append(repr(float(panel.treatments[i, t])))
                row.append(repr(float(panel.outcomes[i, t])))
                writer.writerow(row)
    return schema


def export_schema(k: int) -> PanelSchema:
    """Schema matching :func:`write_panel_csv` output (outcomes already lead)."""
    return PanelSchema(
        time_column="time",
        treatment_column="w",
        outcome_column="y",
        covariate_columns=tuple(f"x{j + 1}" for j in range(k)),
        id_column="id",
        treatment_binarization=Binarization(kind="none"),
        outcome_already_lead=True,
    )


@dataclass(frozen=True)
class CaseStudyResult:
    series_by_treatment: dict[str, EffectSeries]
    reports_by_treatment: dict[str, IngestReport]


def case_study_run(
    path,
    schema: PanelSchema,
    train_config: TrainConfig,
    treatments: Optional[tuple[str, ...]] = None,
    estimator_options: Optional[EstimatorOptions] = None,
) -> CaseStudyResult:
    """Per-treatment effect series on a real panel.

    For each treatment column, builds a panel with that column as treatment
    (removing it from the covariate list if present), trains the factor model
    on the covariate history, infers latents, and runs the learned-instrument
    estimator across every timestep.
    """
    treatments = treatments or (schema.treatment_column,)
    options = estimator_options or EstimatorOptions(allow_ridge=True)
    series: dict[str, EffectSeries] = {}
    reports: dict[str, IngestReport] = {}
    for treatment in treatments:
        covs = tuple(c for c in schema.covariate_columns if c != treatment)
        if not covs:
            raise ConfigError(f"no covariates left for treatment {treatment!r}")
        sub_schema = replace(schema, treatment_column=treatment, covariate_columns=covs)
        panel, report = load_panel(path, sub_schema)
        if panel.n < 2:
            raise RaggedPanel("need at least 2 individuals per timestep")
        result = train(panel, train_config)
        latents = infer_latents(result.params, panel)
        series[treatment] = effect_series(panel, latents, "tsls", options)
        reports[treatment] = report
    return CaseStudyResult(series_by_treatment=series, reports_by_treatment=reports)


def write_effect_series_csv(series: EffectSeries, path) -> None:
    from .estimate import series_csv_rows

    rows = series_csv_rows(series)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["t", "estimator", "beta_hat", "std_error", "first_stage_stat", "error_code"]
        )
        for row in rows:
            writer.writerow(
                [
                    row["t"],
                    row["estimator"],
                    repr(row["beta_hat"]) if isinstance(row["beta_hat"], float) else "",
                    repr(row["std_error"]) if isinstance(row["std_error"], float) else "",
                    repr(row["first_stage_stat"])
                    if isinstance(row["first_stage_stat"], float)
                    else "",
                    row["error_code"],
                ]
            )


def load_schema_file(path) -> tuple[PanelSchema, tuple[str, ...]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return schema_from_json(doc)
