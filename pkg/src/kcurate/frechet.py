"""Frechet distance between Gaussian fits of two embedding clouds.

d^2 = |mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})

The matrix square roots go through symmetric eigendecompositions with
eigenvalues clamped at zero, which keeps the computation real for the
nearly-singular covariances that small sample counts produce. Round-off can
still push the total slightly negative; anything within 1e-8 of zero is
clamped, anything worse is reported as a numeric failure rather than hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInputError,
    ModelMismatchError,
    NonFiniteError,
    NumericError,
    ShapeMismatchError,
)

NEGATIVE_TOLERANCE = 1e-8
RIDGE_SCALE = 1e-6


@dataclass
class GaussianStats:
    """Sample mean, unbiased covariance, and the count that produced them."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _as_matrix(samples) -> np.ndarray:
    matrix = getattr(samples, "vectors", samples)
    return np.asarray(matrix, dtype=np.float64)


def fit_gaussian(samples) -> GaussianStats:
    """Fit mean and unbiased (n-1) covariance, symmetrized, in float64.

    Accepts an [n, d] array or anything exposing a ``vectors`` matrix.
    """
    x = _as_matrix(samples)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected [n, d] samples, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise DegenerateInputError(f"need at least 2 samples for a covariance, got {n}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("samples contain NaN/Inf")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    return GaussianStats(mean=mean, covariance=(cov + cov.T) / 2, count=n)


def _eigh(matrix: np.ndarray):
    try:
        return np.linalg.eigh((matrix + matrix.T) / 2)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition failed: {e}") from None


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = _eigh(matrix)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("covariance eigenvalues are not finite")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_from_moments(
    mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Squared Frechet distance from explicit first and second moments."""
    mean_a, mean_b = np.asarray(mean_a, dtype=np.float64), np.asarray(mean_b, dtype=np.float64)
    cov_a, cov_b = np.asarray(cov_a, dtype=np.float64), np.asarray(cov_b, dtype=np.float64)
    d = mean_a.shape[0]
    if mean_b.shape != (d,) or cov_a.shape != (d, d) or cov_b.shape != (d, d):
        raise ShapeMismatchError(
            f"inconsistent shapes: means {mean_a.shape}/{mean_b.shape}, "
            f"covariances {cov_a.shape}/{cov_b.shape}"
        )
    for arr in (mean_a, mean_b, cov_a, cov_b):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("moments contain NaN/Inf")
    diff = mean_a - mean_b
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner_vals, _ = _eigh(inner)
    if not np.all(np.isfinite(inner_vals)):
        raise NonFiniteError("cross-covariance eigenvalues are not finite")
    trace_cross = np.sum(np.sqrt(np.clip(inner_vals, 0, None)))
    total = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_cross)
    if total < 0:
        if total >= -NEGATIVE_TOLERANCE:
            return 0.0
        raise NumericError(f"distance came out negative beyond tolerance: {total}")
    return total


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two fitted Gaussians (no ridge)."""
    return frechet_from_moments(a.mean, a.covariance, b.mean, b.covariance)


def _ridged(a: GaussianStats, b: GaussianStats, ridge_scale: float):
    """Shared diagonal ridge when either covariance must be rank-deficient."""
    if a.dim != b.dim:
        raise ShapeMismatchError(f"feature dims differ: {a.dim} vs {b.dim}")
    applied = min(a.count, b.count) < a.dim
    cov_a, cov_b = a.covariance, b.covariance
    if applied:
        d = a.dim
        eps = ridge_scale * float((np.trace(cov_a) / d + np.trace(cov_b) / d) / 2)
        eye = np.eye(d)
        cov_a = cov_a + eps * eye
        cov_b = cov_b + eps * eye
    return cov_a, cov_b, applied


def _check_models(a, b):
    model_a, model_b = getattr(a, "model_id", None), getattr(b, "model_id", None)
    if model_a is not None and model_b is not None and model_a != model_b:
        raise ModelMismatchError(
            f"cannot compare embeddings from {model_a!r} with {model_b!r}"
        )


def fdd(a, b, ridge_scale: float = RIDGE_SCALE) -> float:
    """Distribution distance between two embedding clouds.

    Accepts [n, d] arrays or embedding sets; when both carry a model id the
    ids must agree. Rank-deficient covariances (fewer samples than features
    on either side) get a shared diagonal ridge proportional to the average
    variance, keeping the comparison symmetric in its arguments.
    """
    return fdd_report(a, b, ridge_scale)["value"]


def fdd_report(a, b, ridge_scale: float = RIDGE_SCALE) -> dict:
    """fdd plus the bookkeeping a CLI or run report wants alongside it."""
    _check_models(a, b)
    stats_a, stats_b = fit_gaussian(a), fit_gaussian(b)
    cov_a, cov_b, applied = _ridged(stats_a, stats_b, ridge_scale)
    return {
        "value": frechet_from_moments(stats_a.mean, cov_a, stats_b.mean, cov_b),
        "n_a": stats_a.count,
        "n_b": stats_b.count,
        "d": stats_a.dim,
        "ridge_applied": applied,
    }
