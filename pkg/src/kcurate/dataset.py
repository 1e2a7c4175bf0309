"""On-disk conventions, manifest handling, and k-space volume ingestion.

A volume is one HDF5 container holding a complex64 ``kspace`` dataset with
layout ``[slice, coil, ky, kx]``. The manifest is a JSON-lines sidecar: a
header object carrying the volume_id -> container path map, followed by one
object per 2-D slice with exactly the SliceRecord fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import h5py
import numpy as np

from .errors import (
    DatasetMissingError,
    DuplicateKeyError,
    FormatError,
    MissingArtifactError,
    NonFiniteError,
    RankError,
    VolumeMissingError,
)
from .fourier import ifft1c

KSPACE_DATASET = "kspace"
VIEWS = ("axial", "sagittal", "coronal", "other")

# slice axis of the 3-D cube [coil, kz, ky, kx] -> anatomical view label
_VIEW_BY_AXIS = {1: "axial", 2: "coronal", 3: "sagittal"}

MANIFEST_HEADER_KIND = "manifest_header"


@dataclass
class KSpaceVolume:
    """Multi-coil k-space volume, layout [slice, coil, ky, kx]."""

    data: np.ndarray
    volume_id: str

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise RankError(
                f"volume {self.volume_id!r}: expected rank-4 [slice, coil, ky, kx], "
                f"got rank {self.data.ndim}"
            )
        n_slice, n_coil, ny, nx = self.data.shape
        if n_slice < 1 or n_coil < 1 or ny < 8 or nx < 8:
            raise RankError(
                f"volume {self.volume_id!r}: shape {self.data.shape} below the "
                "minimum (slice>=1, coil>=1, ky>=8, kx>=8)"
            )
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"volume {self.volume_id!r} contains NaN/Inf entries")

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def n_coils(self) -> int:
        return self.data.shape[1]


def save_volume(volume: KSpaceVolume, path) -> Path:
    """Write a volume to an HDF5 container (``kspace`` dataset, complex64)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(volume.data, dtype=np.complex64)
    with h5py.File(path, "w") as f:
        f.create_dataset(KSPACE_DATASET, data=data)
        f.attrs["volume_id"] = volume.volume_id
    return path


def load_volume(path) -> KSpaceVolume:
    """Load a k-space volume from an HDF5 container.

    Raises a distinct error per contract violation: missing file, missing
    ``kspace`` dataset, wrong rank, or non-finite entries.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeMissingError(f"no such container: {path}")
    with h5py.File(path, "r") as f:
        if KSPACE_DATASET not in f:
            raise DatasetMissingError(f"{path}: no dataset named {KSPACE_DATASET!r}")
        raw = f[KSPACE_DATASET][()]
        volume_id = f.attrs.get("volume_id", path.stem)
    if raw.ndim != 4:
        raise RankError(f"{path}: kspace dataset has rank {raw.ndim}, expected 4")
    return KSpaceVolume(data=raw, volume_id=str(volume_id))


def split_3d_to_views(cube: np.ndarray, volume_id: str) -> dict[str, KSpaceVolume]:
    """Convert a fully sampled 3-D acquisition into three 2-D view volumes.

    ``cube`` is one complex array [coil, kz, ky, kx]. For each candidate slice
    axis the cube is inverse-FFT'd along that axis only (hybrid space), the
    axis is moved to the front, and the remaining two axes are kept as 2-D
    k-space. Total output slices = kz + ky + kx.
    """
    cube = np.asarray(cube)
    if cube.ndim != 4:
        raise RankError(f"3-D input must be [coil, kz, ky, kx]; got rank {cube.ndim}")
    out = {}
    for axis, view in _VIEW_BY_AXIS.items():
        hybrid = ifft1c(cube, axis=axis)
        stack = np.moveaxis(hybrid, axis, 0)  # [slice, coil, a, b]
        out[view] = KSpaceVolume(
            data=stack.astype(np.complex64), volume_id=f"{volume_id}-{view}"
        )
    return out


@dataclass(frozen=True)
class SliceRecord:
    """Metadata row for one 2-D slice of a stored volume."""

    volume_id: str
    slice_index: int
    source: str
    anatomy: str
    view: str
    contrast: str
    field_strength_tesla: float
    coil_count: int

    def __post_init__(self):
        if not self.volume_id or any(c in self.volume_id for c in "/\\\0"):
            raise FormatError(f"volume_id {self.volume_id!r} is empty or not filename-safe")
        if self.view not in VIEWS:
            raise FormatError(f"view {self.view!r} not one of {VIEWS}")
        if self.slice_index < 0:
            raise FormatError("slice_index must be >= 0")

    @property
    def key(self) -> tuple[str, int]:
        return (self.volume_id, self.slice_index)

    def distribution_key(self) -> str:
        """Grouping key: <source>_<anatomy>_<contrast>_<field>T_<coils>c."""
        return (
            f"{self.source}_{self.anatomy}_{self.contrast}"
            f"_{self.field_strength_tesla:g}T_{self.coil_count}c"
        )


@dataclass
class DatasetManifest:
    """Ordered slice records plus the volume_id -> container path map."""

    records: list[SliceRecord] = field(default_factory=list)
    volume_paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.key)
        seen = set()
        for rec in self.records:
            if rec.key in seen:
                raise DuplicateKeyError(f"duplicate slice record {rec.key}")
            seen.add(rec.key)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def volume_ids(self) -> list[str]:
        out, seen = [], set()
        for rec in self.records:
            if rec.volume_id not in seen:
                seen.add(rec.volume_id)
                out.append(rec.volume_id)
        return out

    def records_for(self, volume_id: str) -> list[SliceRecord]:
        return [r for r in self.records if r.volume_id == volume_id]

    def by_key(self) -> dict[tuple[str, int], SliceRecord]:
        return {r.key: r for r in self.records}

    def path_for(self, volume_id: str) -> Path:
        try:
            return Path(self.volume_paths[volume_id])
        except KeyError:
            raise MissingArtifactError(
                f"manifest has no container path for volume {volume_id!r}"
            ) from None

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            header = {
                "kind": MANIFEST_HEADER_KIND,
                "volume_paths": {k: self.volume_paths[k] for k in sorted(self.volume_paths)},
            }
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"no such manifest: {path}")
        with open(path) as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("kind") != MANIFEST_HEADER_KIND:
            raise FormatError(f"{path}: first line is not a manifest header")
        records = [SliceRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(records=records, volume_paths=dict(header["volume_paths"]))


def read_sidecar(path) -> list[dict]:
    """Read the per-volume metadata sidecar (JSON lines, one row per volume)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such sidecar: {path}")
    rows = []
    with open(path) as f:
        for lineno, ln in enumerate(f, start=1):
            if not ln.strip():
                continue
            try:
                rows.append(json.loads(ln))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: bad JSON ({e})") from None
    return rows


def build_manifest(root, sidecar_rows: list[dict]) -> DatasetManifest:
    """Build one SliceRecord per stored slice from the per-volume sidecar.

    Each sidecar row names a container (path relative to ``root``) plus the
    acquisition metadata shared by all of its slices. Coil count and slice
    count are read from the container itself.
    """
    root = Path(root)
    records: list[SliceRecord] = []
    volume_paths: dict[str, str] = {}
    for row in sidecar_rows:
        vid = row["volume_id"]
        if vid in volume_paths:
            raise DuplicateKeyError(f"duplicate volume_id {vid!r} in sidecar")
        container = root / row["path"]
        if not container.exists():
            raise MissingArtifactError(f"sidecar references missing container {container}")
        vol = load_volume(container)
        volume_paths[vid] = str(container)
        for idx in range(vol.n_slices):
            records.append(
                SliceRecord(
                    volume_id=vid,
                    slice_index=idx,
                    source=row["source"],
                    anatomy=row["anatomy"],
                    view=row["view"],
                    contrast=row["contrast"],
                    field_strength_tesla=float(row["field_strength_tesla"]),
                    coil_count=vol.n_coils,
                )
            )
    return DatasetManifest(records=records, volume_paths=volume_paths)
