"""Undersampling masks and linear reconstructions for multi-coil k-space.

All transforms use the centered orthonormal FFT convention from
:mod:`kcurate.fourier`. Slices are [coil, ky, kx]; masks select readout
columns (the last axis) and broadcast over coils and ky.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import ConfigError, DegenerateMaskError, ShapeMismatchError
from .fourier import ifft2c
from .rng import philox

EPS_DENOM = 1e-12


def center_fraction(acceleration: float) -> float:
    """Fully sampled center fraction for a given acceleration factor.

    0.08 up to 4x, 0.04 from 8x, linear in between.
    """
    if acceleration < 1:
        raise ConfigError(f"acceleration must be >= 1, got {acceleration}")
    if acceleration <= 4:
        return 0.08
    if acceleration >= 8:
        return 0.04
    return 0.08 - 0.01 * (acceleration - 4)


@dataclass(frozen=True)
class UndersamplingMask:
    """Column selection plus the parameters that produced it."""

    line_selector: np.ndarray
    acceleration: float
    center_fraction: float
    offset: int
    seed: int

    @property
    def n_lines(self) -> int:
        return int(self.line_selector.shape[0])

    @property
    def n_sampled(self) -> int:
        return int(self.line_selector.sum())


def make_mask(num_lines: int, acceleration: float, seed: int = 0) -> UndersamplingMask:
    """Fully sampled center block plus equispaced lines with a random offset.

    The total number of sampled columns is exactly floor(num_lines /
    acceleration). Lines beyond the center block are spread over the
    non-center columns at a fractional stride; the integer starting offset
    is drawn uniformly from [0, stride) using a stream keyed by ``seed``,
    so two seeds differ only in the offset phase, never in the center block.
    Acceleration 1 samples every column.
    """
    if num_lines < 16:
        raise ConfigError(f"need at least 16 lines, got {num_lines}")
    if acceleration < 1:
        raise ConfigError(f"acceleration must be >= 1, got {acceleration}")
    selector = np.zeros(num_lines, dtype=bool)
    if acceleration == 1:
        selector[:] = True
        return UndersamplingMask(selector, 1.0, 1.0, 0, seed)
    fraction = center_fraction(acceleration)
    n_center = round(num_lines * fraction)
    n_total = int(num_lines // acceleration)
    if n_total < n_center:
        raise ConfigError(
            f"floor({num_lines}/{acceleration}) = {n_total} lines cannot hold the "
            f"{n_center}-line center block"
        )
    pad = (num_lines - n_center + 1) // 2
    selector[pad : pad + n_center] = True

    offset = 0
    n_rest = n_total - n_center
    if n_rest > 0:
        outside = np.flatnonzero(~selector)
        stride = len(outside) / n_rest
        offset = int(philox(seed).integers(0, max(1, int(np.ceil(stride)))))
        picks = np.floor(offset + stride * np.arange(n_rest)).astype(int)
        selector[outside[picks]] = True
    return UndersamplingMask(selector, float(acceleration), fraction, offset, seed)


def apply_mask(kspace: np.ndarray, mask: UndersamplingMask | np.ndarray) -> np.ndarray:
    """Zero out unsampled readout columns. Works on any [..., ky, kx] array."""
    kspace = np.asarray(kspace)
    selector = mask.line_selector if isinstance(mask, UndersamplingMask) else np.asarray(mask)
    selector = selector.astype(bool)
    if selector.ndim != 1 or selector.shape[0] != kspace.shape[-1]:
        raise ShapeMismatchError(
            f"mask of length {selector.shape} does not fit k-space {kspace.shape}"
        )
    return kspace * selector


def coil_images(kspace: np.ndarray) -> np.ndarray:
    """Per-coil images from [..., coil, ky, kx] k-space."""
    return ifft2c(np.asarray(kspace))


def mvue(kspace: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Minimum-variance unbiased coil combination.

    x = sum_i conj(S_i) * ifft(y_i) / sum_i |S_i|^2, with pixels where the
    sensitivity energy vanishes set to zero. Accepts a single slice
    [coil, ky, kx] or a stack [slice, coil, ky, kx] with matching maps.
    """
    kspace = np.asarray(kspace)
    maps = np.asarray(maps)
    if kspace.shape[-3:] != maps.shape[-3:]:
        raise ShapeMismatchError(
            f"k-space {kspace.shape} and maps {maps.shape} disagree on [coil, ky, kx]"
        )
    imgs = coil_images(kspace)
    num = np.sum(np.conj(maps) * imgs, axis=-3)
    den = np.sum(np.abs(maps) ** 2, axis=-3)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > EPS_DENOM)
    return out


def rss(kspace: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares magnitude combination, [..., ky, kx] real."""
    imgs = coil_images(kspace)
    return np.sqrt(np.sum(np.abs(imgs) ** 2, axis=-3))


def _lowpass_window(n: int, fraction: float) -> np.ndarray:
    """Flat center block of round(fraction*n) with half-cosine shoulders."""
    n_keep = max(2, round(n * fraction))
    pad = (n - n_keep + 1) // 2
    w = np.zeros(n)
    w[pad : pad + n_keep] = 1.0
    ramp = max(1, n_keep // 2)
    t = 0.5 * (1 + np.cos(np.pi * np.arange(1, ramp + 1) / ramp))
    left = pad - np.arange(1, ramp + 1)
    ok = left >= 0
    w[left[ok]] = t[ok]
    right = pad + n_keep - 1 + np.arange(1, ramp + 1)
    ok = right < n
    w[right[ok]] = t[ok]
    return w


def estimate_maps_lowfreq(kspace: np.ndarray, fraction: float = 0.16) -> np.ndarray:
    """Sensitivity estimate from the low-frequency k-space center.

    Each coil's k-space is windowed to the central ``fraction`` of both axes
    (smooth shoulders suppress ringing), inverse-transformed, and normalized
    by the root-sum-of-squares. The estimate has unit coil energy wherever
    the smoothed signal is non-negligible and is zero elsewhere.
    """
    kspace = np.asarray(kspace)
    if kspace.ndim != 3:
        raise ShapeMismatchError(f"expected [coil, ky, kx], got {kspace.shape}")
    if not 0 < fraction <= 0.25:
        raise ConfigError(f"fraction must lie in (0, 0.25], got {fraction}")
    ny, nx = kspace.shape[-2:]
    window = _lowpass_window(ny, fraction)[:, None] * _lowpass_window(nx, fraction)[None, :]
    smooth = ifft2c(kspace * window)
    den = np.sqrt(np.sum(np.abs(smooth) ** 2, axis=0))
    out = np.zeros_like(smooth)
    np.divide(smooth, den, out=out, where=den > EPS_DENOM)
    return out


def foreground_mask(maps: np.ndarray) -> np.ndarray:
    """Boolean anatomy support from estimated sensitivities.

    Thresholds the coil energy map at half its peak, then closes small holes
    with one binary closing pass. Raises if nothing survives, since an empty
    support would silently zero every downstream metric.
    """
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ShapeMismatchError(f"expected [coil, ny, nx], got {maps.shape}")
    energy = np.sum(np.abs(maps) ** 2, axis=0)
    peak = energy.max()
    if peak <= 0:
        raise DegenerateMaskError("sensitivity energy is identically zero")
    mask = scipy.ndimage.binary_closing(energy > 0.5 * peak)
    if not mask.any():
        raise DegenerateMaskError("foreground mask is empty after thresholding")
    return mask


RECON_METHODS = ("mvue", "rss", "zerofilled")


def reconstruct(kspace: np.ndarray, maps: np.ndarray | None, method: str = "mvue") -> np.ndarray:
    """Dispatch a named reconstruction for one slice [coil, ky, kx].

    ``zerofilled`` is the coil combination applied to masked k-space as-is;
    numerically it runs the same combination as ``mvue`` (the zero filling
    already happened in :func:`apply_mask`).
    """
    if method not in RECON_METHODS:
        raise ConfigError(f"unknown reconstruction method {method!r}")
    if method == "rss":
        return rss(kspace)
    if maps is None:
        raise ConfigError(f"method {method!r} needs sensitivity maps")
    return mvue(kspace, maps)
