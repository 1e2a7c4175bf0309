"""Reconstruction quality metrics restricted to the anatomy foreground.

Reconstructions are brought onto the reference intensity scale by a single
global affine map fitted on foreground pixels, then compared with SSIM,
PSNR, and NMSE evaluated only where the foreground mask is set. Corpus
aggregation is a two-stage mean: slices average within their acquisition
distribution first, distributions average with equal weight second, so a
heavily represented protocol cannot dominate the headline number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.ndimage

from .errors import ConfigError, DegenerateInputError, FormatError, ShapeMismatchError
from .rng import philox

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
VARIANCE_FLOOR = 1e-20


def _check_pair(recon: np.ndarray, reference: np.ndarray, mask: np.ndarray):
    if recon.shape != reference.shape or recon.shape != mask.shape:
        raise ShapeMismatchError(
            f"shape mismatch: recon {recon.shape}, reference {reference.shape}, "
            f"mask {mask.shape}"
        )
    if not mask.any():
        raise DegenerateInputError("foreground mask is empty")


def normalize_to_reference(
    recon: np.ndarray, reference: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Fit a*recon + b on foreground pixels to match the reference moments.

    The gain a is positive (ratio of standard deviations), so contrast is
    never inverted. A reconstruction with zero foreground variance has no
    usable scale; it is replaced by a constant image at the reference
    foreground mean and flagged via the second return value.
    """
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(recon, reference, mask)
    rv, fv = recon[mask], reference[mask]
    var = rv.var()
    if var <= VARIANCE_FLOOR:
        return np.full_like(recon, fv.mean()), True
    a = fv.std() / np.sqrt(var)
    b = fv.mean() - a * rv.mean()
    return a * recon + b, False


def masked_ssim(
    recon: np.ndarray,
    reference: np.ndarray,
    mask: np.ndarray,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> float:
    """Mean local SSIM over foreground window centers.

    Both images are zeroed outside the mask before windowing, so the score
    cannot depend on background pixels in any way. Local statistics use a
    uniform window; centers closer than half a window to any image border
    are excluded along with background centers, so every contributing window
    contains only real pixels and the filter's boundary handling never
    matters. The dynamic range is the foreground maximum of the reference.
    """
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(recon, reference, mask)
    if window % 2 != 1 or window < 3:
        raise ConfigError(f"window must be odd and >= 3, got {window}")
    margin = window // 2
    valid = np.zeros_like(mask)
    if mask.shape[0] > 2 * margin and mask.shape[1] > 2 * margin:
        valid[margin:-margin, margin:-margin] = True
    valid &= mask
    if not valid.any():
        raise DegenerateInputError("no valid window centers inside the mask")
    data_range = reference[mask].max()
    if data_range <= 0:
        raise DegenerateInputError("reference foreground is non-positive")
    recon = recon * mask
    reference = reference * mask

    def local_mean(img):
        return scipy.ndimage.uniform_filter(img, size=window)

    mu_x = local_mean(recon)
    mu_y = local_mean(reference)
    var_x = local_mean(recon * recon) - mu_x * mu_x
    var_y = local_mean(reference * reference) - mu_y * mu_y
    cov_xy = local_mean(recon * reference) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map[valid].mean())


def masked_psnr(recon: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Peak SNR in dB over foreground pixels; infinite for an exact match."""
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(recon, reference, mask)
    peak = reference[mask].max()
    if peak <= 0:
        raise DegenerateInputError("reference foreground is non-positive")
    mse = float(np.mean((recon[mask] - reference[mask]) ** 2))
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak * peak / mse))


def masked_nmse(recon: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Foreground squared error normalized by the reference foreground energy."""
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(recon, reference, mask)
    denom = float(np.sum(reference[mask] ** 2))
    if denom <= 0:
        raise DegenerateInputError("reference foreground energy is zero")
    return float(np.sum((recon[mask] - reference[mask]) ** 2) / denom)


@dataclass(frozen=True)
class SliceMetrics:
    """Metric row for one evaluated slice."""

    volume_id: str
    slice_index: int
    distribution_key: str
    ssim: float
    psnr_db: float
    nmse: float
    scale_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "SliceMetrics":
        try:
            return cls(**row)
        except TypeError as exc:
            raise FormatError(f"bad metric row {row!r}: {exc}") from exc


def evaluate_slice(
    recon: np.ndarray,
    reference: np.ndarray,
    mask: np.ndarray,
    volume_id: str = "",
    slice_index: int = 0,
    distribution_key: str = "",
) -> SliceMetrics:
    """Normalize one reconstruction to its reference, then score it."""
    normalized, degenerate = normalize_to_reference(recon, reference, mask)
    return SliceMetrics(
        volume_id=volume_id,
        slice_index=slice_index,
        distribution_key=distribution_key,
        ssim=masked_ssim(normalized, reference, mask),
        psnr_db=masked_psnr(normalized, reference, mask),
        nmse=masked_nmse(normalized, reference, mask),
        scale_degenerate=degenerate,
    )


def _group(values, keys) -> dict[str, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) != len(keys):
        raise ShapeMismatchError(f"{values.shape} values for {len(keys)} keys")
    if len(values) == 0:
        raise DegenerateInputError("nothing to aggregate")
    groups: dict[str, list[float]] = {}
    for v, k in zip(values, keys):
        groups.setdefault(k, []).append(v)
    return {k: np.array(groups[k]) for k in sorted(groups)}


def two_stage_mean(values, keys) -> float:
    """Mean over distributions of the per-distribution slice means."""
    groups = _group(values, keys)
    return float(np.mean([g.mean() for g in groups.values()]))


def per_distribution_means(values, keys) -> dict[str, float]:
    """Slice mean per distribution key, sorted by key."""
    return {k: float(g.mean()) for k, g in _group(values, keys).items()}


def bootstrap_ci(
    values,
    keys,
    seed: int = 0,
    resamples: int = 10_000,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the two-stage mean.

    Each distribution is resampled with replacement to its own size, the
    two-stage mean is recomputed per resample, and the interval is read off
    the (1-level)/2 and (1+level)/2 percentiles of those statistics. Every
    distribution draws from its own seeded stream so the interval is
    reproducible for a fixed seed.
    """
    groups = _group(values, keys)
    if resamples < 1:
        raise ConfigError("need at least one resample")
    if not 0 < level < 1:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    grand = np.zeros(resamples, dtype=np.float64)
    for gi, (_, vals) in enumerate(groups.items()):
        g = philox(seed, gi)
        idx = g.integers(0, len(vals), size=(resamples, len(vals)))
        grand += vals[idx].mean(axis=1)
    grand /= len(groups)
    half = 100 * (1 - level) / 2
    lo, hi = np.percentile(grand, [half, 100 - half])
    return float(lo), float(hi)


METRIC_NAMES = ("ssim", "psnr_db", "nmse")


def build_metric_report(
    rows: list[SliceMetrics],
    seed: int = 0,
    resamples: int = 10_000,
    level: float = 0.95,
    metrics: tuple[str, ...] = METRIC_NAMES,
) -> dict:
    """Assemble rows, per-distribution means, grand means, and intervals."""
    if not rows:
        raise DegenerateInputError("no metric rows to report")
    keys = [r.distribution_key for r in rows]
    report: dict = {
        "rows": [r.to_dict() for r in rows],
        "per_distribution": {},
        "grand_mean": {},
        "ci": {},
        "bootstrap": {"resamples": resamples, "level": level, "seed": seed},
    }
    for name in metrics:
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r}, expected one of {METRIC_NAMES}")
        values = [getattr(r, name) for r in rows]
        report["per_distribution"][name] = per_distribution_means(values, keys)
        report["grand_mean"][name] = two_stage_mean(values, keys)
        lo, hi = bootstrap_ci(values, keys, seed=seed, resamples=resamples, level=level)
        report["ci"][name] = [lo, hi]
    return report
