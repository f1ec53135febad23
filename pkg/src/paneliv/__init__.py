"""paneliv: time-varying causal effects from panels with latent confounders.

The package learns a substitute time-dependent instrument from covariate
history with a recurrent factor model and applies per-timestep two-stage
least squares, alongside baseline estimators, a synthetic benchmark
generator, a replicate-grid benchmark harness, and a CSV ingestion path for
real longitudinal data.
"""

__version__ = "0.1.0"
