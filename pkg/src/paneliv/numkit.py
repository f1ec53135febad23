"""Dense numerics foundation: stable least squares and seeded random streams.

All regressions in the package go through :func:`least_squares_fit`, which
solves via a QR factorization of the design (never the normal equations) and
optionally falls back to a small ridge penalty on near-degenerate designs.
Randomness goes through :class:`RngStream`, a counter-based (Philox) stream
keyed by ``(seed, stream_id)`` so that parallel replicates draw independent,
order-free sequences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NegativeScale, RankDeficient

# Rank test: smallest/largest singular value below this ratio means deficient.
RANK_RTOL = 1e-10
# Ridge fallback strength: lambda = RIDGE_SCALE * sigma_max**2.
RIDGE_SCALE = 1e-8

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _token_to_int(token: int | str) -> int:
    if isinstance(token, str):
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(token) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream fully determined by ``(seed, stream_id)``.

    Streams are value objects: :meth:`generator` returns a *fresh* generator
    each call, so any function taking an ``RngStream`` is pure. Use
    :meth:`child` to derive statistically independent substreams without
    sequencing (safe under parallel execution).
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64):
            raise ValueError("seed must fit in 64 bits")
        if not (0 <= self.stream_id <= _MASK64):
            raise ValueError("stream_id must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        """Fresh counter-based generator keyed by (seed, stream_id)."""
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *tokens: int | str) -> "RngStream":
        """Derive an independent substream labelled by ``tokens``."""
        sid = self.stream_id
        for token in tokens:
            sid = _splitmix64(sid ^ _splitmix64(_token_to_int(token)))
        return RngStream(self.seed, sid)


def gaussian(rng: RngStream | np.random.Generator, mean: float, sd: float, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. normal values.

    Accepts either an :class:`RngStream` (pure: repeated calls with the same
    stream return the same vector) or a live ``numpy`` generator (sequencing:
    consecutive calls continue the stream).
    """
    if sd < 0:
        raise NegativeScale(f"sd must be >= 0, got {sd}")
    if n < 0:
        raise ValueError("n must be >= 0")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return gen.normal(loc=mean, scale=sd, size=n)


def _as_design(design: np.ndarray, response: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    design = np.asarray(design, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    if design.ndim != 2:
        raise DimensionMismatch(f"design must be 2-D, got ndim={design.ndim}")
    if response.ndim == 2 and response.shape[1] == 1:
        response = response[:, 0]
    if response.ndim != 1:
        raise DimensionMismatch(f"response must be 1-D, got ndim={response.ndim}")
    n, d = design.shape
    if response.shape[0] != n:
        raise DimensionMismatch(f"design has {n} rows but response has {response.shape[0]}")
    if n < d:
        raise DimensionMismatch(f"need n >= d, got n={n}, d={d}")
    if not np.isfinite(design).all():
        raise ValueError("design contains non-finite entries")
    if not np.isfinite(response).all():
        raise ValueError("response contains non-finite entries")
    return design, response


def _qr_solve(design: np.ndarray, response: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q, r = np.linalg.qr(design, mode="reduced")
    coef = solve_triangular(r, q.T @ response, lower=False)
    return coef, r


@dataclass(frozen=True)
class LeastSquaresFit:
    """Solution of one least-squares problem plus the pieces needed for SEs."""

    coef: np.ndarray
    used_ridge: bool
    singular_values: np.ndarray
    r_factor: np.ndarray  # R from the QR of the (possibly ridge-augmented) design

    def unscaled_covariance(self) -> np.ndarray:
        """(X'X)^-1 (or (X'X + lambda I)^-1 under the ridge fallback)."""
        d = self.r_factor.shape[0]
        r_inv = solve_triangular(self.r_factor, np.eye(d), lower=False)
        return r_inv @ r_inv.T


def least_squares_fit(
    design: np.ndarray,
    response: np.ndarray,
    *,
    allow_ridge: bool = False,
) -> LeastSquaresFit:
    """Minimize ||design @ coef - response||_2 via QR.

    Raises :class:`RankDeficient` when the smallest singular value is below
    ``RANK_RTOL`` times the largest and ``allow_ridge`` is false; otherwise
    falls back to ridge with ``lambda = RIDGE_SCALE * sigma_max**2`` and flags
    the fit with ``used_ridge=True``.
    """
    design, response = _as_design(design, response)
    svals = np.linalg.svd(design, compute_uv=False)
    smax = float(svals[0]) if svals.size else 0.0
    smin = float(svals[-1]) if svals.size else 0.0
    if smin <= RANK_RTOL * smax or smax == 0.0:
        if not allow_ridge:
            raise RankDeficient(
                f"design is rank deficient (sigma_min/sigma_max = {smin:.3e}/{smax:.3e})"
            )
        lam = RIDGE_SCALE * smax**2 if smax > 0.0 else RIDGE_SCALE
        coef, r = _ridge_qr(design, response, lam)
        return LeastSquaresFit(coef=coef, used_ridge=True, singular_values=svals, r_factor=r)
    coef, r = _qr_solve(design, response)
    return LeastSquaresFit(coef=coef, used_ridge=False, singular_values=svals, r_factor=r)


def solve_least_squares(
    design: np.ndarray, response: np.ndarray, *, allow_ridge: bool = False
) -> np.ndarray:
    """Coefficient vector of the least-squares problem (see least_squares_fit)."""
    return least_squares_fit(design, response, allow_ridge=allow_ridge).coef


def solve_ridge(design: np.ndarray, response: np.ndarray, lam: float) -> np.ndarray:
    """Ridge regression min ||Ax - y||^2 + lam ||x||^2, solved via augmented QR."""
    design, response = _as_design(design, response)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    coef, _ = _ridge_qr(design, response, lam)
    return coef


def _ridge_qr(design: np.ndarray, response: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    d = design.shape[1]
    augmented = np.vstack([design, np.sqrt(lam) * np.eye(d)])
    padded = np.concatenate([response, np.zeros(d)])
    return _qr_solve(augmented, padded)
