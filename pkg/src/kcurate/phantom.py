"""Synthetic multi-coil phantoms with a known ground-truth image.

Images are additive superpositions of ellipses on the [-1, 1]^2 grid. Coil
sensitivities are smooth Gaussian falloff profiles with a linear phase,
normalized so the sum-of-squares map is exactly 1 everywhere. That makes the
coil-combined estimate of a noise-free, fully sampled simulation equal the
ground-truth image up to float round-off, which is what the reconstruction
tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .fourier import fft2c
from .dataset import DatasetManifest, KSpaceVolume, SliceRecord, save_volume
from .rng import philox as _rng


@dataclass(frozen=True)
class Ellipse:
    """One ellipse on the [-1, 1]^2 grid; intensity adds onto the image."""

    center_y: float
    center_x: float
    axis_y: float
    axis_x: float
    angle: float
    intensity: float

    def __post_init__(self):
        if not 0 <= self.intensity <= 1:
            raise ConfigError(f"ellipse intensity must lie in [0, 1], got {self.intensity}")
        if self.axis_y <= 0 or self.axis_x <= 0:
            raise ConfigError("ellipse semi-axes must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic description of one synthetic slice."""

    grid_size: tuple[int, int] = (64, 64)
    ellipses: tuple[Ellipse, ...] = ()
    coil_count: int = 4
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        ny, nx = self.grid_size
        if ny < 16 or nx < 16:
            raise ConfigError(f"grid {self.grid_size} below the 16x16 minimum")
        if self.coil_count < 1:
            raise ConfigError("coil_count must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def coil_maps(grid_size: tuple[int, int], coil_count: int) -> np.ndarray:
    """Smooth complex sensitivities [coil, ny, nx] with sum-of-squares 1.

    Gaussian falloff centered on a ring just outside the field of view plus
    a per-coil linear phase. Entirely deterministic given the shape and coil
    count.
    """
    ny, nx = grid_size
    yy, xx = np.meshgrid(np.linspace(-1, 1, ny), np.linspace(-1, 1, nx), indexing="ij")
    angles = 2 * np.pi * np.arange(coil_count) / coil_count
    mags = np.empty((coil_count, ny, nx), dtype=np.float64)
    phases = np.empty((coil_count, ny, nx), dtype=np.float64)
    for i, ang in enumerate(angles):
        cy, cx = 1.1 * np.sin(ang), 1.1 * np.cos(ang)
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mags[i] = np.exp(-r2 / (2 * 0.8**2))
        phases[i] = 0.5 * (np.cos(ang) * yy + np.sin(ang) * xx)
    denom = np.sqrt(np.sum(mags**2, axis=0))
    return ((mags / denom) * np.exp(1j * phases)).astype(np.complex128)


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render (image complex [ny, nx], maps [coil, ny, nx]) from a spec."""
    ny, nx = spec.grid_size
    yy, xx = np.meshgrid(np.linspace(-1, 1, ny), np.linspace(-1, 1, nx), indexing="ij")
    img = np.zeros((ny, nx), dtype=np.float64)
    for e in spec.ellipses:
        ct, st = np.cos(e.angle), np.sin(e.angle)
        u = (yy - e.center_y) * ct + (xx - e.center_x) * st
        v = -(yy - e.center_y) * st + (xx - e.center_x) * ct
        img += e.intensity * ((u / e.axis_y) ** 2 + (v / e.axis_x) ** 2 <= 1.0)
    return img.astype(np.complex128), coil_maps(spec.grid_size, spec.coil_count)


def simulate_kspace(
    image: np.ndarray,
    maps: np.ndarray,
    noise_sigma: float = 0.0,
    seed: int = 0,
    volume_id: str = "sim",
) -> KSpaceVolume:
    """Forward-model one slice into a 1-slice volume: y_i = F(S_i * x) + z_i.

    The noise z_i is complex white Gaussian with per-sample expected squared
    modulus noise_sigma^2 (each component has std sigma/sqrt(2)). Each coil
    draws from its own counter-based stream keyed (seed, coil), making the
    result independent of evaluation order.
    """
    image = np.asarray(image)
    maps = np.asarray(maps)
    if image.ndim != 2 or maps.ndim != 3 or maps.shape[1:] != image.shape:
        raise ShapeMismatchError(f"image {image.shape} does not match maps {maps.shape}")
    kspace = fft2c((maps * image[None, :, :]).astype(np.complex128))
    if noise_sigma > 0:
        scale = noise_sigma / np.sqrt(2.0)
        for i in range(maps.shape[0]):
            g = _rng(seed, i)
            kspace[i] += scale * (
                g.standard_normal(image.shape) + 1j * g.standard_normal(image.shape)
            )
    return KSpaceVolume(data=kspace[None], volume_id=volume_id)


def random_spec(
    seed: int,
    grid_size: tuple[int, int] = (64, 64),
    coil_count: int = 4,
    noise_sigma: float = 0.0,
) -> PhantomSpec:
    """Draw a spec with 3 to 8 random ellipses from a seeded stream."""
    g = _rng(seed, 0xC0)
    ellipses = []
    for _ in range(int(g.integers(3, 9))):
        cy, cx = g.uniform(-0.5, 0.5, size=2)
        ay, ax = g.uniform(0.1, 0.6, size=2)
        ellipses.append(
            Ellipse(
                center_y=float(cy),
                center_x=float(cx),
                axis_y=float(ay),
                axis_x=float(ax),
                angle=float(g.uniform(0, np.pi)),
                intensity=float(g.uniform(0.2, 1.0)),
            )
        )
    return PhantomSpec(
        grid_size=grid_size,
        ellipses=tuple(ellipses),
        coil_count=coil_count,
        noise_sigma=noise_sigma,
        seed=seed,
    )


def phantom_volume(
    seed: int,
    n_slices: int = 1,
    grid_size: tuple[int, int] = (64, 64),
    coil_count: int = 4,
    noise_sigma: float = 0.0,
    volume_id: str | None = None,
) -> tuple[KSpaceVolume, np.ndarray, np.ndarray]:
    """Simulate a multi-slice volume of independent random phantoms.

    Returns (volume, images [slice, ny, nx] complex, maps [coil, ny, nx]).
    """
    vid = volume_id if volume_id is not None else f"phantom{seed:04d}"
    images, stacks = [], []
    maps = coil_maps(grid_size, coil_count)
    for s in range(n_slices):
        spec = random_spec(seed * 1000 + s, grid_size, coil_count, noise_sigma)
        image, _ = make_phantom(spec)
        images.append(image)
        vol = simulate_kspace(image, maps, noise_sigma=noise_sigma, seed=spec.seed)
        stacks.append(vol.data[0])
    return (
        KSpaceVolume(data=np.stack(stacks).astype(np.complex64), volume_id=vid),
        np.stack(images),
        maps,
    )


def write_corpus(
    out_dir,
    count: int,
    grid_size: tuple[int, int] = (64, 64),
    coil_count: int = 4,
    seed: int = 0,
    slices_per_volume: int = 1,
    noise_sigma: float = 0.0,
    source: str = "phantom",
    id_prefix: str = "phantom",
) -> Path:
    """Write a corpus of phantom containers plus its manifest; returns the path."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, paths = [], {}
    for v in range(count):
        vid = f"{id_prefix}{v:04d}"
        vol, _, _ = phantom_volume(
            seed * 100_003 + v,
            n_slices=slices_per_volume,
            grid_size=grid_size,
            coil_count=coil_count,
            noise_sigma=noise_sigma,
            volume_id=vid,
        )
        paths[vid] = str(save_volume(vol, out_dir / f"{vid}.h5"))
        for s in range(slices_per_volume):
            records.append(
                SliceRecord(
                    volume_id=vid,
                    slice_index=s,
                    source=source,
                    anatomy="synthetic",
                    view="axial",
                    contrast="sim",
                    field_strength_tesla=3.0,
                    coil_count=coil_count,
                )
            )
    manifest = DatasetManifest(records=records, volume_paths=paths)
    return manifest.save(out_dir / "manifest.jsonl")
