"""Per-timestep causal-effect estimators.

Four estimators of the step-t effect of the binary treatment on the next-step
outcome: two-stage least squares with a supplied instrument (the learned
latent, or the hidden instrument process in oracle runs), the unadjusted
baseline, covariate-adjusted OLS, and a cross-fitted linear double-ML
comparator. All estimators are pure functions of their inputs; a constant
treatment column raises ``DegenerateTreatment``. Constant covariate columns
are dropped from designs (they carry no information beyond the intercept).

Timesteps are 1-based: ``t`` ranges over ``1..panel.t_steps`` and the stored
outcome at index t is the next-step outcome, so every step has a response.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .datagen import SyntheticPanel, TrajectoryPanel
from .errors import DegenerateTreatment, DimensionMismatch, RankDeficient, WeakInstrumentWarning
from .factor import LatentPanel
from .numkit import least_squares_fit

WEAK_INSTRUMENT_THRESHOLD = 10.0


class EstimatorId(str, Enum):
    TSLS = "tsls"
    NAIVE = "naive"
    ADJUSTED_OLS = "adjusted_ols"
    LINEAR_DML = "linear_dml"


@dataclass(frozen=True)
class EffectEstimate:
    """One per-timestep effect estimate with its diagnostics."""

    t: int
    beta_hat: float
    std_error: float
    estimator_id: EstimatorId
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.beta_hat):
            raise ValueError("beta_hat must be finite")
        if not (np.isfinite(self.std_error) and self.std_error >= 0):
            raise ValueError("std_error must be finite and >= 0")


@dataclass(frozen=True)
class StepFailure:
    t: int
    error_code: str
    message: str


@dataclass(frozen=True)
class EffectSeries:
    """Per-timestep estimates ordered by t, with failed steps recorded as gaps."""

    estimates: tuple[EffectEstimate, ...]
    failures: tuple[StepFailure, ...]
    estimator_id: EstimatorId
    panel_fingerprint: str
    options: dict

    def estimate_at(self, t: int) -> Optional[EffectEstimate]:
        for est in self.estimates:
            if est.t == t:
                return est
        return None


@dataclass(frozen=True)
class EstimatorOptions:
    include_covariates: bool = True
    allow_ridge: bool = False
    dml_folds: int = 5

    def as_dict(self) -> dict:
        return {
            "include_covariates": self.include_covariates,
            "allow_ridge": self.allow_ridge,
            "dml_folds": self.dml_folds,
        }


def panel_fingerprint(panel: TrajectoryPanel) -> str:
    digest = hashlib.sha256()
    for arr in (panel.covariates, panel.treatments, panel.outcomes):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def oracle_latents(panel: SyntheticPanel) -> LatentPanel:
    """The hidden instrument process packaged as a latent panel (oracle runs)."""
    return LatentPanel(
        latents=panel.latent_s[:, :, None].copy(),
        source_fingerprint="oracle:" + panel_fingerprint(panel.observed),
    )


def _check_step(panel: TrajectoryPanel, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not (1 <= t <= panel.t_steps):
        raise DimensionMismatch(f"t={t} outside 1..{panel.t_steps}")
    w = panel.treatments[:, t - 1]
    y = panel.outcomes[:, t - 1]
    x = panel.covariates[:, t - 1, :]
    if np.ptp(w) == 0.0:
        raise DegenerateTreatment(f"treatment is constant at t={t}")
    return w, y, x


def _active_columns(x: np.ndarray) -> np.ndarray:
    """Drop bitwise-constant columns; near-collinearity is left to the solver."""
    keep = np.ptp(x, axis=0) > 0.0
    return x[:, keep]


def _ols(
    y: np.ndarray, design: np.ndarray, *, allow_ridge: bool = False
) -> tuple[np.ndarray, np.ndarray, float, bool]:
    """Coefficients, residuals, homoscedastic sigma^2, ridge flag."""
    fit = least_squares_fit(design, y, allow_ridge=allow_ridge)
    resid = y - design @ fit.coef
    dof = max(design.shape[0] - design.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    return fit.coef, resid, sigma2, fit.used_ridge


def _ols_estimate(
    panel: TrajectoryPanel,
    t: int,
    with_covariates: bool,
    estimator_id: EstimatorId,
    allow_ridge: bool = False,
) -> EffectEstimate:
    w, y, x = _check_step(panel, t)
    cols = [np.ones_like(w), w]
    if with_covariates:
        xa = _active_columns(x)
        if xa.shape[1]:
            cols.append(xa)
    design = np.column_stack(cols)
    fit = least_squares_fit(design, y, allow_ridge=allow_ridge)
    resid = y - design @ fit.coef
    dof = max(design.shape[0] - design.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * fit.unscaled_covariance()
    return EffectEstimate(
        t=t,
        beta_hat=float(fit.coef[1]),
        std_error=float(np.sqrt(max(cov[1, 1], 0.0))),
        estimator_id=estimator_id,
        diagnostics={"n": panel.n, "used_ridge": fit.used_ridge},
    )


def naive_step(panel: TrajectoryPanel, t: int) -> EffectEstimate:
    """Unadjusted baseline: OLS of the outcome on [1, W_t]."""
    return _ols_estimate(panel, t, with_covariates=False, estimator_id=EstimatorId.NAIVE)


def adjusted_ols_step(
    panel: TrajectoryPanel, t: int, *, allow_ridge: bool = False
) -> EffectEstimate:
    """Covariate-adjusted comparator: OLS of the outcome on [1, W_t, X_t]."""
    return _ols_estimate(
        panel, t, with_covariates=True, estimator_id=EstimatorId.ADJUSTED_OLS,
        allow_ridge=allow_ridge,
    )


def tsls_step(
    panel: TrajectoryPanel,
    latents: LatentPanel,
    t: int,
    include_covariates: bool = True,
    *,
    allow_ridge: bool = False,
) -> EffectEstimate:
    """Two-stage least squares with the step-t latent as instrument.

    Stage 1 regresses W_t on [1, L_t, X_t]; stage 2 regresses the outcome on
    [1, What_t, X_t]. Standard errors use stage-2 residuals computed with the
    original treatment. Diagnostics carry the first-stage partial-F statistic;
    values below 10 additionally emit a :class:`WeakInstrumentWarning`.
    """
    w, y, x = _check_step(panel, t)
    if latents.latents.shape[0] != panel.n or latents.latents.shape[1] != panel.t_steps:
        raise DimensionMismatch("latent panel shape does not match the trajectory panel")
    instrument = latents.latents[:, t - 1, :]

    ones = np.ones_like(w)
    xa = _active_columns(x) if include_covariates else np.empty((w.shape[0], 0))
    exog = [ones] + ([xa] if xa.shape[1] else [])
    stage1_design = np.column_stack(exog + [instrument])
    n_iv = instrument.shape[1]

    coef1, resid_u, _, ridge1 = _ols(w, stage1_design, allow_ridge=allow_ridge)
    w_hat = stage1_design @ coef1

    # Partial F for the instrument block: restricted stage 1 without L_t.
    restricted = np.column_stack(exog)
    _, resid_r, _, _ = _ols(w, restricted, allow_ridge=allow_ridge)
    rss_u = float(resid_u @ resid_u)
    rss_r = float(resid_r @ resid_r)
    dof_u = max(panel.n - stage1_design.shape[1], 1)
    if rss_u > 0.0:
        first_stage_stat = ((rss_r - rss_u) / n_iv) / (rss_u / dof_u)
    else:
        first_stage_stat = np.inf
    if first_stage_stat < WEAK_INSTRUMENT_THRESHOLD:
        warnings.warn(
            f"first-stage statistic {first_stage_stat:.2f} < {WEAK_INSTRUMENT_THRESHOLD:g} at t={t}",
            WeakInstrumentWarning,
            stacklevel=2,
        )

    stage2_design = np.column_stack([ones, w_hat] + ([xa] if xa.shape[1] else []))
    fit2 = least_squares_fit(stage2_design, y, allow_ridge=allow_ridge)
    beta_hat = float(fit2.coef[1])

    # Structural residuals: original treatment, stage-2 coefficients.
    structural = np.column_stack([ones, w] + ([xa] if xa.shape[1] else []))
    resid2 = y - structural @ fit2.coef
    dof2 = max(panel.n - stage2_design.shape[1], 1)
    sigma2 = float(resid2 @ resid2) / dof2
    cov = sigma2 * fit2.unscaled_covariance()
    return EffectEstimate(
        t=t,
        beta_hat=beta_hat,
        std_error=float(np.sqrt(max(cov[1, 1], 0.0))),
        estimator_id=EstimatorId.TSLS,
        diagnostics={
            "n": panel.n,
            "first_stage_stat": float(first_stage_stat),
            "weak_instrument": bool(first_stage_stat < WEAK_INSTRUMENT_THRESHOLD),
            "used_ridge": bool(ridge1 or fit2.used_ridge),
            "n_instruments": n_iv,
        },
    )


def linear_dml_step(panel: TrajectoryPanel, t: int, folds: int = 5) -> EffectEstimate:
    """Cross-fitted partialling-out with OLS nuisances.

    Out-of-fold OLS fits of the outcome and the treatment on [1, X_t] produce
    residuals; the effect is the slope of the outcome residuals on the
    treatment residuals. Folds are assigned by individual index modulo the
    fold count.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    w, y, x = _check_step(panel, t)
    n = panel.n
    if n < 2 * folds:
        raise DimensionMismatch(f"need n >= 2*folds, got n={n}, folds={folds}")
    xa = _active_columns(x)
    nuisance_design = np.column_stack([np.ones(n)] + ([xa] if xa.shape[1] else []))

    fold_of = np.arange(n) % folds
    y_resid = np.empty(n)
    w_resid = np.empty(n)
    for f in range(folds):
        test = fold_of == f
        train = ~test
        coef_y = least_squares_fit(nuisance_design[train], y[train]).coef
        coef_w = least_squares_fit(nuisance_design[train], w[train]).coef
        y_resid[test] = y[test] - nuisance_design[test] @ coef_y
        w_resid[test] = w[test] - nuisance_design[test] @ coef_w

    if np.ptp(w_resid) == 0.0:
        raise DegenerateTreatment(f"treatment residuals are constant at t={t}")
    final_design = np.column_stack([np.ones(n), w_resid])
    fit = least_squares_fit(final_design, y_resid)
    resid = y_resid - final_design @ fit.coef
    dof = max(n - 2, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * fit.unscaled_covariance()
    return EffectEstimate(
        t=t,
        beta_hat=float(fit.coef[1]),
        std_error=float(np.sqrt(max(cov[1, 1], 0.0))),
        estimator_id=EstimatorId.LINEAR_DML,
        diagnostics={"n": n, "folds": folds},
    )


def effect_series(
    panel: TrajectoryPanel,
    latents: Optional[LatentPanel],
    estimator_id: EstimatorId | str,
    options: Optional[EstimatorOptions] = None,
) -> EffectSeries:
    """Apply one step estimator across every timestep.

    Steps that raise ``DegenerateTreatment`` or ``RankDeficient`` are recorded
    as gaps with the error attached; other errors propagate.
    """
    estimator_id = EstimatorId(estimator_id)
    options = options or EstimatorOptions()
    if estimator_id is EstimatorId.TSLS and latents is None:
        raise ValueError("tsls requires a latent panel")

    estimates: list[EffectEstimate] = []
    failures: list[StepFailure] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        for t in range(1, panel.t_steps + 1):
            try:
                if estimator_id is EstimatorId.TSLS:
                    est = tsls_step(
                        panel, latents, t,
                        include_covariates=options.include_covariates,
                        allow_ridge=options.allow_ridge,
                    )
                elif estimator_id is EstimatorId.NAIVE:
                    est = naive_step(panel, t)
                elif estimator_id is EstimatorId.ADJUSTED_OLS:
                    est = adjusted_ols_step(panel, t, allow_ridge=options.allow_ridge)
                else:
                    est = linear_dml_step(panel, t, folds=options.dml_folds)
                estimates.append(est)
            except (DegenerateTreatment, RankDeficient) as exc:
                failures.append(
                    StepFailure(t=t, error_code=type(exc).__name__, message=str(exc))
                )
    return EffectSeries(
        estimates=tuple(estimates),
        failures=tuple(failures),
        estimator_id=estimator_id,
        panel_fingerprint=panel_fingerprint(panel),
        options=options.as_dict(),
    )


def series_csv_rows(series: EffectSeries) -> list[dict]:
    """Flat rows for CSV export (one per step, gaps included)."""
    rows = []
    for est in series.estimates:
        rows.append(
            {
                "t": est.t,
                "estimator": est.estimator_id.value,
                "beta_hat": est.beta_hat,
                "std_error": est.std_error,
                "first_stage_stat": est.diagnostics.get("first_stage_stat", ""),
                "error_code": "",
            }
        )
    for failure in series.failures:
        rows.append(
            {
                "t": failure.t,
                "estimator": series.estimator_id.value,
                "beta_hat": "",
                "std_error": "",
                "first_stage_stat": "",
                "error_code": failure.error_code,
            }
        )
    rows.sort(key=lambda r: r["t"])
    return rows
