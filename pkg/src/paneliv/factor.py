"""Recurrent factor model that learns a substitute time-dependent instrument.

A single-layer LSTM consumes the covariate history: the first latent is
produced from a trainable initial state with no covariate input, and the
latent at step t is produced after feeding the covariates of step t-1. An
affine (optionally one-hidden-layer) head maps the hidden state to a
low-dimensional latent L_t, and per-covariate affine emission heads with free
scales sigma_j define a factorized Gaussian likelihood of the step-t
covariates given L_t:

    loss = mean over individuals of
           sum_t sum_j [ log sigma_j + (x_tj - g_j(L_t))^2 / (2 sigma_j^2)
                         + 0.5 log(2 pi) ]

Training maximizes that likelihood with mini-batch Adam, inverted dropout on
the hidden state (training only), and full backpropagation through time for
exact analytic gradients. Covariates are z-scored over the training panel and
the transform travels with the parameters, so inference on raw panels is
self-contained. After training, the latents are extracted per individual per
timestep and handed to the instrumental-variable estimators.

Everything here is deterministic given the seed: the same panel and config
yield bit-identical parameters, and inference is a pure function of
(parameters, panel).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .datagen import TrajectoryPanel
from .errors import ConfigError, DimensionMismatch, NonFiniteGradient, NonFiniteLoss
from .numkit import RngStream

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_FORMAT = "paneliv-factor-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the factor-model trainer.

    ``keep_probability`` is the probability of *keeping* a hidden unit under
    dropout (0.8 keeps 80% of units). ``fc_units=0`` keeps the latent head
    affine; a positive value inserts a tanh hidden layer of that width.
    ``include_treatment_input`` appends the previous treatment to the
    recurrence input (off by default: the recurrence consumes covariate
    history only).
    """

    epochs: int = 100
    batch_size: int = 128
    hidden_units: int = 128
    learning_rate: float = 1e-3
    keep_probability: float = 0.8
    latent_dim: int = 1
    seed: int = 0
    fc_units: int = 0
    include_treatment_input: bool = False
    grad_clip: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be >= 1")
        if not (0.0 < self.keep_probability <= 1.0):
            raise ConfigError("keep_probability must be in (0, 1]")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.fc_units < 0:
            raise ConfigError("fc_units must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must fit in 64 bits")


@dataclass(frozen=True)
class Standardizer:
    """Per-covariate z-score transform learned on the training panel."""

    mean: np.ndarray  # (k,)
    scale: np.ndarray  # (k,), constant columns get scale 1

    def apply(self, covariates: np.ndarray) -> np.ndarray:
        return (covariates - self.mean) / self.scale

    @staticmethod
    def fit(covariates: np.ndarray) -> "Standardizer":
        flat = covariates.reshape(-1, covariates.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        scale = np.where(std > 0.0, std, 1.0)
        return Standardizer(mean=mean, scale=scale)


@dataclass
class FactorParams:
    """All trainable parameters plus the input transform.

    Gate packing order in the stacked LSTM matrices is (input, forget,
    output, candidate), each block of ``hidden_units`` rows. ``psi_h`` and
    ``psi_c`` form the trainable initial state consumed at the first step.
    Emission scales are stored as log-scales so positivity is structural.
    """

    input_weights: np.ndarray  # (4H, D)
    recurrent_weights: np.ndarray  # (4H, H)
    gate_biases: np.ndarray  # (4H,)
    psi_h: np.ndarray  # (H,)
    psi_c: np.ndarray  # (H,)
    head_hidden_w: Optional[np.ndarray]  # (F, H) or None
    head_hidden_b: Optional[np.ndarray]  # (F,) or None
    latent_w: np.ndarray  # (d_L, H or F)
    latent_b: np.ndarray  # (d_L,)
    emission_w: np.ndarray  # (k, d_L)
    emission_b: np.ndarray  # (k,)
    log_sigma: np.ndarray  # (k,)
    standardizer: Standardizer
    include_treatment_input: bool = False
    train_config: Optional[TrainConfig] = None

    @property
    def hidden_units(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.latent_w.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.emission_w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.input_weights.dtype

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def tensor_names(self) -> list[str]:
        names = ["input_weights", "recurrent_weights", "gate_biases", "psi_h", "psi_c"]
        if self.head_hidden_w is not None:
            names += ["head_hidden_w", "head_hidden_b"]
        names += ["latent_w", "latent_b", "emission_w", "emission_b", "log_sigma"]
        return names

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.tensor_names()}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "FactorParams":
        return replace(self, **tensors)


@dataclass(frozen=True)
class LatentPanel:
    """Inferred substitute instrument per individual per timestep."""

    latents: np.ndarray  # (n, t_steps, d_L)
    source_fingerprint: str

    def __post_init__(self):
        if self.latents.ndim != 3:
            raise DimensionMismatch("latents must have shape (n, t_steps, d_L)")
        if not np.isfinite(self.latents).all():
            raise ValueError("latents contain non-finite values")


@dataclass(frozen=True)
class TrainResult:
    params: FactorParams
    loss_curve: np.ndarray  # (epochs,) mean per-individual loss


def init_factor_params(
    n_covariates: int,
    config: TrainConfig,
    standardizer: Optional[Standardizer] = None,
    rng: Optional[RngStream] = None,
) -> FactorParams:
    """Seeded parameter initialization (scaled Gaussians, forget bias 1)."""
    if rng is None:
        rng = RngStream(config.seed).child("init")
    gen = rng.generator()
    h = config.hidden_units
    d_in = n_covariates + (1 if config.include_treatment_input else 0)
    d_l = config.latent_dim
    dtype = np.dtype(config.dtype)

    def draw(shape, sd):
        return gen.normal(0.0, sd, size=shape)

    input_weights = draw((4 * h, d_in), 1.0 / math.sqrt(max(d_in, 1)))
    recurrent_weights = draw((4 * h, h), 1.0 / math.sqrt(h))
    gate_biases = np.zeros(4 * h)
    gate_biases[h : 2 * h] = 1.0  # forget gate open at init
    psi_h = draw(h, 0.1)
    psi_c = draw(h, 0.1)
    if config.fc_units > 0:
        head_hidden_w = draw((config.fc_units, h), 1.0 / math.sqrt(h))
        head_hidden_b = np.zeros(config.fc_units)
        latent_w = draw((d_l, config.fc_units), 1.0 / math.sqrt(config.fc_units))
    else:
        head_hidden_w = None
        head_hidden_b = None
        latent_w = draw((d_l, h), 1.0 / math.sqrt(h))
    latent_b = np.zeros(d_l)
    emission_w = draw((n_covariates, d_l), 1.0 / math.sqrt(d_l))
    emission_b = np.zeros(n_covariates)
    log_sigma = np.zeros(n_covariates)

    if standardizer is None:
        standardizer = Standardizer(mean=np.zeros(n_covariates), scale=np.ones(n_covariates))

    def cast(a):
        return None if a is None else a.astype(dtype)

    return FactorParams(
        input_weights=cast(input_weights),
        recurrent_weights=cast(recurrent_weights),
        gate_biases=cast(gate_biases),
        psi_h=cast(psi_h),
        psi_c=cast(psi_c),
        head_hidden_w=cast(head_hidden_w),
        head_hidden_b=cast(head_hidden_b),
        latent_w=cast(latent_w),
        latent_b=cast(latent_b),
        emission_w=cast(emission_w),
        emission_b=cast(emission_b),
        log_sigma=cast(log_sigma),
        standardizer=standardizer,
        include_treatment_input=config.include_treatment_input,
        train_config=config,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _build_inputs(params: FactorParams, panel: TrajectoryPanel, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardized targets (B,T,k) and lagged recurrence inputs (B,T,D)."""
    if panel.k != params.n_covariates:
        raise DimensionMismatch(
            f"panel has k={panel.k} covariates but params expect {params.n_covariates}"
        )
    dtype = params.dtype
    x_std = params.standardizer.apply(panel.covariates[idx]).astype(dtype)
    b, t_steps, k = x_std.shape
    if params.include_treatment_input:
        feats = np.concatenate(
            [x_std, panel.treatments[idx][:, :, None].astype(dtype)], axis=2
        )
    else:
        feats = x_std
    inputs = np.zeros((b, t_steps, feats.shape[2]), dtype=dtype)
    inputs[:, 1:, :] = feats[:, :-1, :]  # step t consumes features of step t-1
    return x_std, inputs


class _ForwardCache:
    """Per-batch activations retained for backpropagation through time."""

    __slots__ = (
        "inputs", "x_std", "i", "f", "o", "g", "c", "tanh_c", "h_prev", "h_drop",
        "drop_mask", "fc_act", "latents", "means", "resid", "loss",
    )


def _forward(
    params: FactorParams,
    x_std: np.ndarray,
    inputs: np.ndarray,
    drop_mask: Optional[np.ndarray] = None,
    keep_cache: bool = True,
) -> _ForwardCache:
    b, t_steps, _ = inputs.shape
    h_units = params.hidden_units
    dtype = params.dtype

    inp_proj = inputs.reshape(b * t_steps, -1) @ params.input_weights.T
    inp_proj = inp_proj.reshape(b, t_steps, 4 * h_units)

    cache = _ForwardCache()
    if keep_cache:
        cache.i = np.empty((b, t_steps, h_units), dtype=dtype)
        cache.f = np.empty_like(cache.i)
        cache.o = np.empty_like(cache.i)
        cache.g = np.empty_like(cache.i)
        cache.c = np.empty_like(cache.i)
        cache.tanh_c = np.empty_like(cache.i)
        cache.h_prev = np.empty_like(cache.i)

    h = np.broadcast_to(params.psi_h, (b, h_units)).astype(dtype)
    c = np.broadcast_to(params.psi_c, (b, h_units)).astype(dtype)
    h_drop_all = np.empty((b, t_steps, h_units), dtype=dtype)

    for t in range(t_steps):
        z = inp_proj[:, t, :] + h @ params.recurrent_weights.T + params.gate_biases
        i_g = _sigmoid(z[:, :h_units])
        f_g = _sigmoid(z[:, h_units : 2 * h_units])
        o_g = _sigmoid(z[:, 2 * h_units : 3 * h_units])
        g_g = np.tanh(z[:, 3 * h_units :])
        c_new = f_g * c + i_g * g_g
        tanh_c = np.tanh(c_new)
        h_new = o_g * tanh_c
        if keep_cache:
            cache.i[:, t] = i_g
            cache.f[:, t] = f_g
            cache.o[:, t] = o_g
            cache.g[:, t] = g_g
            cache.c[:, t] = c_new
            cache.tanh_c[:, t] = tanh_c
            cache.h_prev[:, t] = h
        h, c = h_new, c_new
        h_drop_all[:, t] = h if drop_mask is None else h * drop_mask[:, t]

    if params.head_hidden_w is not None:
        fc_pre = h_drop_all.reshape(b * t_steps, -1) @ params.head_hidden_w.T + params.head_hidden_b
        fc_act = np.tanh(fc_pre)
        latents = fc_act @ params.latent_w.T + params.latent_b
        if keep_cache:
            cache.fc_act = fc_act.reshape(b, t_steps, -1)
    else:
        latents = h_drop_all.reshape(b * t_steps, -1) @ params.latent_w.T + params.latent_b
        if keep_cache:
            cache.fc_act = None
    latents = latents.reshape(b, t_steps, params.latent_dim)

    means = latents.reshape(b * t_steps, -1) @ params.emission_w.T + params.emission_b
    means = means.reshape(b, t_steps, params.n_covariates)
    resid = x_std - means

    sigma2 = np.exp(2.0 * params.log_sigma.astype(np.float64))
    resid64 = resid.astype(np.float64)
    per_term = params.log_sigma.astype(np.float64) + HALF_LOG_2PI
    loss = float(
        np.sum(resid64**2 / (2.0 * sigma2)) / b + t_steps * np.sum(per_term)
    )

    cache.inputs = inputs
    cache.x_std = x_std
    cache.drop_mask = drop_mask
    cache.latents = latents
    cache.means = means
    cache.resid = resid
    cache.loss = loss
    if keep_cache:
        cache.h_drop = h_drop_all
    return cache


def _backward(params: FactorParams, cache: _ForwardCache) -> dict[str, np.ndarray]:
    b, t_steps, h_units = cache.i.shape
    dtype = params.dtype
    sigma2 = np.exp(2.0 * params.log_sigma).astype(dtype)

    # Emission layer: d loss / d mean = -resid / sigma^2, averaged over batch.
    dmeans = (-cache.resid / sigma2) / b
    flat_dmeans = dmeans.reshape(b * t_steps, -1)
    flat_latents = cache.latents.reshape(b * t_steps, -1)
    d_emission_w = flat_dmeans.T @ flat_latents
    d_emission_b = flat_dmeans.sum(axis=0)
    d_log_sigma = (
        t_steps * b * np.ones_like(params.log_sigma)
        - (cache.resid.astype(np.float64) ** 2 / sigma2.astype(np.float64)).sum(axis=(0, 1))
    ) / b
    d_log_sigma = d_log_sigma.astype(dtype)

    d_latents = flat_dmeans @ params.emission_w  # (B*T, d_L)

    if params.head_hidden_w is not None:
        flat_fc = cache.fc_act.reshape(b * t_steps, -1)
        d_latent_w = d_latents.T @ flat_fc
        d_latent_b = d_latents.sum(axis=0)
        d_fc = (d_latents @ params.latent_w) * (1.0 - flat_fc**2)
        flat_h_drop = cache.h_drop.reshape(b * t_steps, -1)
        d_head_hidden_w = d_fc.T @ flat_h_drop
        d_head_hidden_b = d_fc.sum(axis=0)
        d_h_drop = (d_fc @ params.head_hidden_w).reshape(b, t_steps, h_units)
    else:
        flat_h_drop = cache.h_drop.reshape(b * t_steps, -1)
        d_latent_w = d_latents.T @ flat_h_drop
        d_latent_b = d_latents.sum(axis=0)
        d_head_hidden_w = None
        d_head_hidden_b = None
        d_h_drop = (d_latents @ params.latent_w).reshape(b, t_steps, h_units)

    if cache.drop_mask is not None:
        d_h_head = d_h_drop * cache.drop_mask
    else:
        d_h_head = d_h_drop

    dz_all = np.empty((b, t_steps, 4 * h_units), dtype=dtype)
    dh_next = np.zeros((b, h_units), dtype=dtype)
    dc_next = np.zeros((b, h_units), dtype=dtype)
    for t in range(t_steps - 1, -1, -1):
        dh = d_h_head[:, t] + dh_next
        i_g, f_g, o_g, g_g = cache.i[:, t], cache.f[:, t], cache.o[:, t], cache.g[:, t]
        tanh_c = cache.tanh_c[:, t]
        do = dh * tanh_c
        dc = dc_next + dh * o_g * (1.0 - tanh_c**2)
        c_prev = cache.c[:, t - 1] if t > 0 else np.broadcast_to(params.psi_c, (b, h_units))
        df = dc * c_prev
        di = dc * g_g
        dg = dc * i_g
        dz = dz_all[:, t]
        dz[:, :h_units] = di * i_g * (1.0 - i_g)
        dz[:, h_units : 2 * h_units] = df * f_g * (1.0 - f_g)
        dz[:, 2 * h_units : 3 * h_units] = do * o_g * (1.0 - o_g)
        dz[:, 3 * h_units :] = dg * (1.0 - g_g**2)
        dh_next = dz @ params.recurrent_weights
        dc_next = dc * f_g

    flat_dz = dz_all.reshape(b * t_steps, -1)
    d_input_weights = flat_dz.T @ cache.inputs.reshape(b * t_steps, -1)
    d_recurrent_weights = flat_dz.T @ cache.h_prev.reshape(b * t_steps, -1)
    d_gate_biases = flat_dz.sum(axis=0)
    d_psi_h = dh_next.sum(axis=0)
    d_psi_c = dc_next.sum(axis=0)

    grads = {
        "input_weights": d_input_weights,
        "recurrent_weights": d_recurrent_weights,
        "gate_biases": d_gate_biases,
        "psi_h": d_psi_h,
        "psi_c": d_psi_c,
        "latent_w": d_latent_w,
        "latent_b": d_latent_b,
        "emission_w": d_emission_w,
        "emission_b": d_emission_b,
        "log_sigma": d_log_sigma,
    }
    if d_head_hidden_w is not None:
        grads["head_hidden_w"] = d_head_hidden_w
        grads["head_hidden_b"] = d_head_hidden_b
    return grads


def forward(
    params: FactorParams, panel: TrajectoryPanel, individual: int
) -> tuple[np.ndarray, np.ndarray]:
    """Latent trajectory (T, d_L) and predicted covariate means (T, k).

    Pure function; no dropout. The first latent is produced from the trainable
    initial state alone, later latents consume the previous step's covariates.
    Predicted means are on the standardized covariate scale.
    """
    if not (0 <= individual < panel.n):
        raise DimensionMismatch(f"individual index {individual} out of range")
    idx = np.array([individual])
    x_std, inputs = _build_inputs(params, panel, idx)
    cache = _forward(params, x_std, inputs, drop_mask=None, keep_cache=True)
    return cache.latents[0].copy(), cache.means[0].copy()


def negative_log_likelihood(
    params: FactorParams, panel: TrajectoryPanel, indices: Optional[np.ndarray] = None
) -> float:
    """Mean per-individual Gaussian NLL of the covariates given the latents."""
    idx = np.arange(panel.n) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValueError("batch must be nonempty")
    x_std, inputs = _build_inputs(params, panel, idx)
    cache = _forward(params, x_std, inputs, drop_mask=None, keep_cache=False)
    if not math.isfinite(cache.loss):
        raise NonFiniteLoss(f"loss is {cache.loss}")
    return cache.loss


def gradients(
    params: FactorParams, panel: TrajectoryPanel, indices: Optional[np.ndarray] = None
) -> dict[str, np.ndarray]:
    """Exact gradient of negative_log_likelihood for every parameter tensor."""
    idx = np.arange(panel.n) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValueError("batch must be nonempty")
    x_std, inputs = _build_inputs(params, panel, idx)
    cache = _forward(params, x_std, inputs, drop_mask=None, keep_cache=True)
    if not math.isfinite(cache.loss):
        raise NonFiniteLoss(f"loss is {cache.loss}")
    grads = _backward(params, cache)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient for {name} contains non-finite values")
    return grads


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        return {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads


def train(panel: TrajectoryPanel, config: TrainConfig) -> TrainResult:
    """Fit the factor model; deterministic given ``config.seed``.

    Returns the trained parameters together with the loss curve (mean
    per-individual NLL per epoch, measured at the parameters used for each
    batch, i.e. the usual online training loss).
    """
    stream = RngStream(config.seed)
    standardizer = Standardizer.fit(panel.covariates)
    params = init_factor_params(panel.k, config, standardizer, stream.child("init"))

    batch_size = min(config.batch_size, panel.n)
    shuffle_gen = stream.child("shuffle").generator()
    dropout_gen = stream.child("dropout").generator()
    dtype = params.dtype
    keep = config.keep_probability

    adam_m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    lr = config.learning_rate

    loss_curve = np.zeros(config.epochs)
    for epoch in range(config.epochs):
        order = shuffle_gen.permutation(panel.n)
        epoch_loss = 0.0
        for start in range(0, panel.n, batch_size):
            idx = order[start : start + batch_size]
            x_std, inputs = _build_inputs(params, panel, idx)
            if keep < 1.0:
                mask = (
                    dropout_gen.random((idx.size, panel.t_steps, config.hidden_units)) < keep
                ).astype(dtype) / dtype.type(keep)
            else:
                mask = None
            cache = _forward(params, x_std, inputs, drop_mask=mask, keep_cache=True)
            if not math.isfinite(cache.loss):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}, batch start {start}")
            epoch_loss += cache.loss * idx.size
            grads = _clip_gradients(_backward(params, cache), config.grad_clip)

            step += 1
            bc1 = 1.0 - beta1**step
            bc2 = 1.0 - beta2**step
            tensors = params.tensors()
            new_tensors = {}
            for name in params.tensor_names():
                g = grads[name]
                adam_m[name] = beta1 * adam_m[name] + (1.0 - beta1) * g
                adam_v[name] = beta2 * adam_v[name] + (1.0 - beta2) * (g * g)
                m_hat = adam_m[name] / bc1
                v_hat = adam_v[name] / bc2
                new_tensors[name] = (
                    tensors[name] - dtype.type(lr) * m_hat / (np.sqrt(v_hat) + dtype.type(eps))
                ).astype(dtype)
            params = params.with_tensors(new_tensors)
        loss_curve[epoch] = epoch_loss / panel.n
    return TrainResult(params=params, loss_curve=loss_curve)


def infer_latents(params: FactorParams, panel: TrajectoryPanel) -> LatentPanel:
    """Forward-pass latents for every individual; pure, no dropout."""
    x_std, inputs = _build_inputs(params, panel, np.arange(panel.n))
    cache = _forward(params, x_std, inputs, drop_mask=None, keep_cache=False)
    fingerprint = _fingerprint(params, panel)
    return LatentPanel(
        latents=cache.latents.astype(np.float64), source_fingerprint=fingerprint
    )


def _fingerprint(params: FactorParams, panel: TrajectoryPanel) -> str:
    digest = hashlib.sha256()
    digest.update(checkpoint_bytes(params))
    for arr in (panel.covariates, panel.treatments, panel.outcomes):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":  # store little-endian
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(spec: dict) -> np.ndarray:
    raw = base64.b64decode(spec["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
    return arr.copy()


def checkpoint_bytes(params: FactorParams) -> bytes:
    """Canonical JSON checkpoint; round-trips bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden_units": params.hidden_units,
        "latent_dim": params.latent_dim,
        "n_covariates": params.n_covariates,
        "include_treatment_input": params.include_treatment_input,
        "dtype": str(params.dtype),
        "standardizer": {
            "mean": _encode_array(params.standardizer.mean),
            "scale": _encode_array(params.standardizer.scale),
        },
        "train_config": None
        if params.train_config is None
        else {
            "epochs": params.train_config.epochs,
            "batch_size": params.train_config.batch_size,
            "hidden_units": params.train_config.hidden_units,
            "learning_rate": params.train_config.learning_rate,
            "keep_probability": params.train_config.keep_probability,
            "latent_dim": params.train_config.latent_dim,
            "seed": params.train_config.seed,
            "fc_units": params.train_config.fc_units,
            "include_treatment_input": params.train_config.include_treatment_input,
            "grad_clip": params.train_config.grad_clip,
            "dtype": params.train_config.dtype,
        },
        "tensors": {name: _encode_array(arr) for name, arr in params.tensors().items()},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: FactorParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> FactorParams:
    with open(path, "rb") as fh:
        doc = json.loads(fh.read().decode("utf-8"))
    return params_from_checkpoint_doc(doc)


def params_from_checkpoint_doc(doc: dict) -> FactorParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a factor-model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {name: _decode_array(spec) for name, spec in doc["tensors"].items()}
    std = Standardizer(
        mean=_decode_array(doc["standardizer"]["mean"]),
        scale=_decode_array(doc["standardizer"]["scale"]),
    )
    tc = None
    if doc.get("train_config") is not None:
        tc = TrainConfig(**doc["train_config"])
    return FactorParams(
        input_weights=tensors["input_weights"],
        recurrent_weights=tensors["recurrent_weights"],
        gate_biases=tensors["gate_biases"],
        psi_h=tensors["psi_h"],
        psi_c=tensors["psi_c"],
        head_hidden_w=tensors.get("head_hidden_w"),
        head_hidden_b=tensors.get("head_hidden_b"),
        latent_w=tensors["latent_w"],
        latent_b=tensors["latent_b"],
        emission_w=tensors["emission_w"],
        emission_b=tensors["emission_b"],
        log_sigma=tensors["log_sigma"],
        standardizer=std,
        include_treatment_input=doc["include_treatment_input"],
        train_config=tc,
    )
