"""Cheap per-slice quality filters that run before any learned scoring.

Two screens, both computed on coil-combined magnitude images:

* energy ratio: a slice whose peak intensity is a small fraction of the
  volume peak is noise-dominated (edge-of-stack slices, scan padding).
* edge density: a slice with almost no detected edges is structureless
  (uniform calibration signal, severe blur).

Both thresholds are strict: a slice exactly at the threshold is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import skimage.feature

from .errors import ConfigError, DegenerateInputError

# Gaussian smoothing inside the edge detector uses radius 4*sigma, so the
# kernel spans 17 pixels at sigma=2; smaller images cannot be screened.
EDGE_SIGMA = 2.0
EDGE_LOW = 0.01
EDGE_HIGH = 0.2
MIN_EDGE_SIZE = int(4 * EDGE_SIGMA) * 2 + 1


@dataclass(frozen=True)
class HeuristicThresholds:
    energy: float = 0.11
    edge: float = 0.017

    def __post_init__(self):
        for name in ("energy", "edge"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} threshold must lie in [0, 1], got {v}")


def energy_ratio(slice_magnitude: np.ndarray, volume_peak: float) -> float:
    """Peak of this slice relative to the peak over its whole volume."""
    slice_magnitude = np.asarray(slice_magnitude)
    if volume_peak <= 0:
        raise DegenerateInputError("volume peak must be positive")
    return float(slice_magnitude.max() / volume_peak)


def edge_density(image: np.ndarray) -> float:
    """Fraction of pixels on a detected edge.

    ``image`` must already be normalized to the volume peak so the fixed
    hysteresis thresholds mean the same thing for every slice.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DegenerateInputError(f"expected a 2-D image, got shape {image.shape}")
    if min(image.shape) < MIN_EDGE_SIZE:
        raise DegenerateInputError(
            f"image {image.shape} smaller than the {MIN_EDGE_SIZE}px smoothing kernel"
        )
    edges = skimage.feature.canny(
        image, sigma=EDGE_SIGMA, low_threshold=EDGE_LOW, high_threshold=EDGE_HIGH
    )
    return float(edges.mean())


@dataclass
class HeuristicReport:
    """Per-slice screening scores plus the combined keep decision."""

    energy: np.ndarray
    edges: np.ndarray
    keep: np.ndarray

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def screen_volume(
    magnitudes: np.ndarray, thresholds: HeuristicThresholds = HeuristicThresholds()
) -> HeuristicReport:
    """Apply both screens to a stack of magnitude slices [slice, ny, nx].

    Energy ratios use the raw magnitudes; edge detection runs on slices
    normalized by the volume peak. A slice survives only if it strictly
    clears both thresholds.
    """
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if magnitudes.ndim != 3:
        raise DegenerateInputError(f"expected [slice, ny, nx], got {magnitudes.shape}")
    peak = float(magnitudes.max())
    if peak <= 0:
        raise DegenerateInputError("volume is identically zero")
    n = magnitudes.shape[0]
    energy = np.array([energy_ratio(magnitudes[i], peak) for i in range(n)])
    edges = np.array([edge_density(magnitudes[i] / peak) for i in range(n)])
    keep = (energy > thresholds.energy) & (edges > thresholds.edge)
    return HeuristicReport(energy=energy, edges=edges, keep=keep)


def heuristic_filter(
    manifest,
    magnitude_loader,
    thresholds: HeuristicThresholds = HeuristicThresholds(),
) -> tuple[list, list[dict]]:
    """Screen every manifest slice; returns (kept entries, per-slice scores).

    ``magnitude_loader(volume_id)`` must return that volume's reconstructed
    magnitude stack [slice, ny, nx]. Kept entries carry weight 1 and are the
    slices that strictly clear both thresholds. A stack with fewer slices
    than the manifest records is reported as a missing reconstruction.
    """
    from .alignment import SelectedSlice
    from .errors import MissingArtifactError

    entries, scores = [], []
    for vid in manifest.volume_ids():
        records = manifest.records_for(vid)
        mags = magnitude_loader(vid)
        report = screen_volume(mags, thresholds)
        for rec in records:
            if rec.slice_index >= mags.shape[0]:
                raise MissingArtifactError(
                    f"no reconstruction for slice ({vid!r}, {rec.slice_index})"
                )
            i = rec.slice_index
            scores.append(
                {
                    "volume_id": vid,
                    "slice_index": i,
                    "energy": float(report.energy[i]),
                    "edge": float(report.edges[i]),
                    "keep": bool(report.keep[i]),
                }
            )
            if report.keep[i]:
                entries.append(SelectedSlice(vid, i, 1.0))
    return entries, scores
