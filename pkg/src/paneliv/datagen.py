"""Synthetic longitudinal panels with latent confounders and a latent instrument.

The generator follows a p-order autoregressive scheme. Per timestep ``t`` (with
any term indexed ``t - i < 1`` contributing zero):

    X_t = (1/p) sum_i (alpha_i X_{t-i} + omega_i W_{t-i}) + eps_X
    U_t = (1/p) sum_i (beta_i  U_{t-i} + lambda_i W_{t-i}) + eps_U
    S_t = (1/p) sum_i (gamma_i S_{t-i} + delta_i sum_j X_{t-i,j}) + eps_S

with eps ~ N(0, noise_sd^2) per component. Treatment assignment mixes the three
processes through their sums over the most recent ``min(p, t)`` steps
(current step included):

    theta_t = mu_x * Xhat_t + mu_u * Uhat_t + mu_s * Shat_t
    W_t ~ Bernoulli(sigmoid(c * theta_t))

and the stored outcome at index t is the next-step outcome

    Y_{t+1} = rho_w W_t + rho_x sum_j X_{t,j} + rho_u sum_j U_{t,j}

which is noiseless by default (``outcome_noise_sd`` adds an optional term).
``X_t`` is a vector of dim_x covariates, ``U_t`` a vector of dim_u latent
confounders, and ``S_t`` a scalar latent process; scalar-coefficient terms
acting on vectors broadcast, and vector terms entering scalar equations are
summed over components. The self-recursion reading of the S process is the
documented interpretation of its history term.

Coefficients are drawn once per replicate and shared by all individuals:
alpha_i, lambda_i, delta_i ~ N(0, 0.5^2); omega_i, beta_i, gamma_i
~ N(1 - i/p, (i/p)^2); mu_x, mu_u, mu_s, c ~ N(0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionMismatch
from .numkit import RngStream, gaussian


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the synthetic panel generator."""

    n_individuals: int
    p_order: int = 1
    t_steps: int = 20
    dim_x: int = 3
    dim_u: int = 3
    rho_w: float = 0.5
    rho_x: float = 0.5
    rho_u: float = 0.5
    noise_sd: float = 0.01
    outcome_noise_sd: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.n_individuals < 1:
            raise ConfigError("n_individuals must be >= 1")
        if self.p_order < 1:
            raise ConfigError("p_order must be >= 1")
        if self.t_steps < self.p_order:
            raise ConfigError("t_steps must be >= p_order")
        if self.dim_x < 1:
            raise ConfigError("dim_x must be >= 1")
        if self.dim_u < 1:
            raise ConfigError("dim_u must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.outcome_noise_sd < 0:
            raise ConfigError("outcome_noise_sd must be >= 0")
        if not (0 <= self.master_seed < 2**64):
            raise ConfigError("master_seed must fit in 64 bits")


@dataclass(frozen=True)
class PanelCoefficients:
    """Per-replicate coefficients, drawn once before the time recursion."""

    alpha: np.ndarray
    lambda_: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    mu_x: float
    mu_u: float
    mu_s: float
    c: float

    def __post_init__(self):
        p = len(self.alpha)
        for name in ("lambda_", "delta", "omega", "beta", "gamma"):
            if len(getattr(self, name)) != p:
                raise DimensionMismatch(f"coefficient array {name} must have length {p}")


@dataclass(frozen=True)
class TrajectoryPanel:
    """Observed longitudinal data; ``outcomes[:, t-1]`` holds Y_{t+1}."""

    covariates: np.ndarray  # (n, t_steps, k)
    treatments: np.ndarray  # (n, t_steps)
    outcomes: np.ndarray  # (n, t_steps)

    def __post_init__(self):
        if self.covariates.ndim != 3:
            raise DimensionMismatch("covariates must have shape (n, t_steps, k)")
        n, t, _ = self.covariates.shape
        if self.treatments.shape != (n, t) or self.outcomes.shape != (n, t):
            raise DimensionMismatch("treatments/outcomes must have shape (n, t_steps)")
        for name in ("covariates", "treatments", "outcomes"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def t_steps(self) -> int:
        return self.covariates.shape[1]

    @property
    def k(self) -> int:
        return self.covariates.shape[2]


@dataclass(frozen=True)
class SyntheticPanel:
    """A trajectory panel plus the hidden ground truth used for evaluation."""

    observed: TrajectoryPanel
    latent_u: np.ndarray  # (n, t_steps, dim_u)
    latent_s: np.ndarray  # (n, t_steps)
    true_effect: float
    coefficients: PanelCoefficients
    config: SimConfig


def replicate_seed(master_seed: int, replicate: int) -> RngStream:
    """Stream for one replicate; pure in (master_seed, replicate)."""
    return RngStream(master_seed, replicate)


def draw_coefficients(config: SimConfig, rng: RngStream | np.random.Generator) -> PanelCoefficients:
    """Draw one replicate's coefficient set (fixed draw order)."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    p = config.p_order
    alpha = gaussian(gen, 0.0, 0.5, p)
    lambda_ = gaussian(gen, 0.0, 0.5, p)
    delta = gaussian(gen, 0.0, 0.5, p)
    omega = np.empty(p)
    beta = np.empty(p)
    gamma = np.empty(p)
    for i in range(1, p + 1):
        omega[i - 1] = gaussian(gen, 1.0 - i / p, i / p, 1)[0]
        beta[i - 1] = gaussian(gen, 1.0 - i / p, i / p, 1)[0]
        gamma[i - 1] = gaussian(gen, 1.0 - i / p, i / p, 1)[0]
    mu_x, mu_u, mu_s, c = gaussian(gen, 0.0, 1.0, 4)
    return PanelCoefficients(
        alpha=alpha, lambda_=lambda_, delta=delta, omega=omega, beta=beta, gamma=gamma,
        mu_x=mu_x, mu_u=mu_u, mu_s=mu_s, c=c,
    )


def simulate_panel(
    config: SimConfig,
    replicate: int = 0,
    coefficients: Optional[PanelCoefficients] = None,
) -> SyntheticPanel:
    """Generate one synthetic panel; bit-identical for fixed (config, replicate).

    ``coefficients`` overrides the per-replicate draw (used to build
    degenerate panels in tests, e.g. confounding switched off).
    """
    stream = replicate_seed(config.master_seed, replicate)
    if coefficients is None:
        coefficients = draw_coefficients(config, stream.child("coefficients"))
    co = coefficients
    gen = stream.child("paths").generator()

    n, t_steps, p = config.n_individuals, config.t_steps, config.p_order
    kx, ku = config.dim_x, config.dim_u
    x = np.zeros((n, t_steps, kx))
    u = np.zeros((n, t_steps, ku))
    s = np.zeros((n, t_steps))
    w = np.zeros((n, t_steps))
    y = np.zeros((n, t_steps))

    for t in range(1, t_steps + 1):
        ti = t - 1
        x_t = gaussian(gen, 0.0, config.noise_sd, n * kx).reshape(n, kx)
        u_t = gaussian(gen, 0.0, config.noise_sd, n * ku).reshape(n, ku)
        s_t = gaussian(gen, 0.0, config.noise_sd, n)
        for i in range(1, p + 1):
            if t - i < 1:
                continue
            hi = t - i - 1
            x_t += (co.alpha[i - 1] * x[:, hi, :] + co.omega[i - 1] * w[:, hi][:, None]) / p
            u_t += (co.beta[i - 1] * u[:, hi, :] + co.lambda_[i - 1] * w[:, hi][:, None]) / p
            s_t += (co.gamma[i - 1] * s[:, hi] + co.delta[i - 1] * x[:, hi, :].sum(axis=1)) / p
        x[:, ti, :] = x_t
        u[:, ti, :] = u_t
        s[:, ti] = s_t

        lo = max(0, t - p)
        x_hat = x[:, lo:t, :].sum(axis=(1, 2))
        u_hat = u[:, lo:t, :].sum(axis=(1, 2))
        s_hat = s[:, lo:t].sum(axis=1)
        theta = co.mu_x * x_hat + co.mu_u * u_hat + co.mu_s * s_hat
        w[:, ti] = (gen.random(n) < expit(co.c * theta)).astype(np.float64)

        y[:, ti] = (
            config.rho_w * w[:, ti]
            + config.rho_x * x_t.sum(axis=1)
            + config.rho_u * u_t.sum(axis=1)
        )
        if config.outcome_noise_sd > 0:
            y[:, ti] += gaussian(gen, 0.0, config.outcome_noise_sd, n)

    observed = TrajectoryPanel(covariates=x, treatments=w, outcomes=y)
    return SyntheticPanel(
        observed=observed,
        latent_u=u,
        latent_s=s,
        true_effect=config.rho_w,
        coefficients=co,
        config=config,
    )


def treatment_probabilities(panel: SyntheticPanel) -> np.ndarray:
    """Assignment probabilities sigmoid(c * theta_t) implied by the hidden state."""
    cfg, co = panel.config, panel.coefficients
    x, u, s = panel.observed.covariates, panel.latent_u, panel.latent_s
    probs = np.zeros((cfg.n_individuals, cfg.t_steps))
    for t in range(1, cfg.t_steps + 1):
        lo = max(0, t - cfg.p_order)
        theta = (
            co.mu_x * x[:, lo:t, :].sum(axis=(1, 2))
            + co.mu_u * u[:, lo:t, :].sum(axis=(1, 2))
            + co.mu_s * s[:, lo:t].sum(axis=1)
        )
        probs[:, t - 1] = expit(co.c * theta)
    return probs
