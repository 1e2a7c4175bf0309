"""Patch embeddings: extraction, binary interchange format, and exact kNN.

The interchange file (magic ``KEMB``) is the boundary between this package
and any external embedding model. Layout, all little-endian:

    4 bytes  magic "KEMB"
    u32      format version (1)
    u32      n rows
    u32      d features
    u16      model id byte length, then that many UTF-8 bytes
    n*d      float32 embedding matrix, row-major
    u64      refs byte length, then that many bytes of JSON lines,
             one per row, in row order

Each ref line carries volume_id, slice_index, patch_row, patch_col.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    MissingArtifactError,
    ModelMismatchError,
    ShapeMismatchError,
)

KEMB_MAGIC = b"KEMB"
KEMB_VERSION = 1
PATCH_SIZE = 128


@dataclass(frozen=True, order=True)
class PatchRef:
    """Where a patch came from: volume, slice, and tile-grid position."""

    volume_id: str
    slice_index: int
    patch_row: int
    patch_col: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "volume_id": self.volume_id,
                "slice_index": self.slice_index,
                "patch_row": self.patch_row,
                "patch_col": self.patch_col,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "PatchRef":
        row = json.loads(line)
        return cls(
            volume_id=row["volume_id"],
            slice_index=int(row["slice_index"]),
            patch_row=int(row["patch_row"]),
            patch_col=int(row["patch_col"]),
        )


@dataclass
class EmbeddingSet:
    """A float32 embedding matrix with row-aligned patch provenance."""

    vectors: np.ndarray
    refs: list[PatchRef]
    model_id: str

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ShapeMismatchError(f"vectors must be [n, d], got {self.vectors.shape}")
        if len(self.refs) != self.vectors.shape[0]:
            raise ShapeMismatchError(
                f"{self.vectors.shape[0]} rows but {len(self.refs)} refs"
            )

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, indices) -> "EmbeddingSet":
        indices = np.asarray(indices, dtype=int)
        return EmbeddingSet(
            vectors=self.vectors[indices],
            refs=[self.refs[i] for i in indices],
            model_id=self.model_id,
        )


def write_embeddings(embeddings: EmbeddingSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model_bytes = embeddings.model_id.encode("utf-8")
    if len(model_bytes) > 0xFFFF:
        raise FormatError("model id longer than 65535 bytes")
    refs_bytes = "".join(r.to_json() + "\n" for r in embeddings.refs).encode("utf-8")
    with open(path, "wb") as f:
        f.write(KEMB_MAGIC)
        f.write(struct.pack("<III", KEMB_VERSION, len(embeddings), embeddings.dim))
        f.write(struct.pack("<H", len(model_bytes)))
        f.write(model_bytes)
        f.write(embeddings.vectors.astype("<f4").tobytes(order="C"))
        f.write(struct.pack("<Q", len(refs_bytes)))
        f.write(refs_bytes)
    return path


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such embedding file: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != KEMB_MAGIC:
            raise FormatError(f"{path}: bad magic, not an embedding file")
        version, n, d = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != KEMB_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        (model_len,) = struct.unpack("<H", _read_exact(f, 2, "model id length"))
        model_id = _read_exact(f, model_len, "model id").decode("utf-8")
        vectors = np.frombuffer(
            _read_exact(f, 4 * n * d, "embedding matrix"), dtype="<f4"
        ).reshape(n, d)
        (refs_len,) = struct.unpack("<Q", _read_exact(f, 8, "refs length"))
        refs_raw = _read_exact(f, refs_len, "refs").decode("utf-8")
    lines = refs_raw.splitlines()
    if len(lines) != n:
        raise FormatError(f"{path}: {n} rows but {len(lines)} ref lines")
    refs = [PatchRef.from_json(ln) for ln in lines]
    return EmbeddingSet(vectors=vectors.copy(), refs=refs, model_id=model_id)


def extract_patches(
    image: np.ndarray, volume_id: str, slice_index: int, patch_size: int = PATCH_SIZE
) -> tuple[np.ndarray, list[PatchRef]]:
    """Tile one magnitude image into non-overlapping square patches.

    Tiles are taken in raster order; partial tiles at the bottom/right are
    dropped. An image smaller than the patch along an axis is zero-padded
    symmetrically along that axis first, so every slice yields at least one
    patch.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got {image.shape}")
    ny, nx = image.shape
    pads = []
    for n in (ny, nx):
        short = max(0, patch_size - n)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        image = np.pad(image, pads)
        ny, nx = image.shape
    rows, cols = ny // patch_size, nx // patch_size
    patches = np.empty((rows * cols, patch_size, patch_size), dtype=np.float32)
    refs = []
    k = 0
    for r in range(rows):
        for c in range(cols):
            patches[k] = image[
                r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size
            ]
            refs.append(PatchRef(volume_id, slice_index, r, c))
            k += 1
    return patches, refs


def write_patch_dir(directory, patches: np.ndarray, refs: list[PatchRef]) -> Path:
    """Export patches for external embedding models.

    Layout: ``patches.bin`` (count * size * size float32, little-endian,
    row-major), ``refs.jsonl`` (one provenance line per patch, same order),
    ``meta.json`` (count, patch size, dtype).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patches = np.ascontiguousarray(patches, dtype=np.float32)
    if patches.ndim != 3 or patches.shape[1] != patches.shape[2]:
        raise ShapeMismatchError(f"expected [n, size, size], got {patches.shape}")
    if patches.shape[0] != len(refs):
        raise ShapeMismatchError(f"{patches.shape[0]} patches but {len(refs)} refs")
    (directory / "patches.bin").write_bytes(patches.astype("<f4").tobytes(order="C"))
    with open(directory / "refs.jsonl", "w") as f:
        for r in refs:
            f.write(r.to_json() + "\n")
    meta = {"count": int(patches.shape[0]), "patch_size": int(patches.shape[1]), "dtype": "float32"}
    with open(directory / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True)
        f.write("\n")
    return directory


def read_patch_dir(directory) -> tuple[np.ndarray, list[PatchRef]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise MissingArtifactError(f"no patch export at {directory}")
    meta = json.loads(meta_path.read_text())
    n, size = int(meta["count"]), int(meta["patch_size"])
    raw = (directory / "patches.bin").read_bytes()
    if len(raw) != 4 * n * size * size:
        raise FormatError(f"{directory}: patches.bin has {len(raw)} bytes, expected {4*n*size*size}")
    patches = np.frombuffer(raw, dtype="<f4").reshape(n, size, size).copy()
    with open(directory / "refs.jsonl") as f:
        refs = [PatchRef.from_json(ln) for ln in f if ln.strip()]
    if len(refs) != n:
        raise FormatError(f"{directory}: {n} patches but {len(refs)} refs")
    return patches, refs


def zero_sibling_path(path) -> Path:
    """Where the zero-patch reference embedding lives, next to its main file."""
    path = Path(path)
    return path.with_name(path.stem + ".zero.kemb")


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length in float64; zero rows stay zero."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, float64, [len(a), len(b)]."""
    return _unit_rows(a) @ _unit_rows(b).T


def _require_same_model(a: EmbeddingSet, b: EmbeddingSet, what: str):
    if a.model_id != b.model_id:
        raise ModelMismatchError(
            f"{what}: embeddings from {a.model_id!r} cannot be compared "
            f"with {b.model_id!r}"
        )


def reject_empty(
    embeddings: EmbeddingSet, zero_reference: EmbeddingSet, threshold: float = 0.6
) -> EmbeddingSet:
    """Drop rows that look like the embedding of an all-zero patch.

    ``zero_reference`` is a one-row set holding the model's embedding of a
    zero-valued patch. Rows whose cosine to it strictly exceeds the
    threshold are removed.
    """
    _require_same_model(embeddings, zero_reference, "empty-patch rejection")
    if len(zero_reference) != 1:
        raise ConfigError(f"zero reference must have exactly 1 row, got {len(zero_reference)}")
    sims = cosine_matrix(embeddings.vectors, zero_reference.vectors)[:, 0]
    return embeddings.subset(np.flatnonzero(~(sims > threshold)))


def dedup_within_volume(embeddings: EmbeddingSet, threshold: float = 0.9) -> EmbeddingSet:
    """Greedy near-duplicate removal, independently within each volume.

    Patches are visited in (slice_index, patch_row, patch_col) order; a
    patch is dropped when its cosine to any already-kept patch of the same
    volume strictly exceeds the threshold. Earlier patches therefore shadow
    later near-copies, and a dropped patch shadows nothing.
    """
    unit = _unit_rows(embeddings.vectors)
    by_volume: dict[str, list[int]] = {}
    for i, ref in enumerate(embeddings.refs):
        by_volume.setdefault(ref.volume_id, []).append(i)
    kept: list[int] = []
    for volume_id in by_volume:
        order = sorted(
            by_volume[volume_id],
            key=lambda i: (
                embeddings.refs[i].slice_index,
                embeddings.refs[i].patch_row,
                embeddings.refs[i].patch_col,
            ),
        )
        kept_here: list[int] = []
        for i in order:
            if kept_here and np.any(unit[kept_here] @ unit[i] > threshold):
                continue
            kept_here.append(i)
        kept.extend(kept_here)
    return embeddings.subset(sorted(kept))


class KNNIndex:
    """Exact brute-force cosine nearest neighbors over an embedding set.

    Rankings are total orders: ties in similarity are broken by the patch
    reference (volume_id, slice_index, patch_row, patch_col), so results
    are reproducible regardless of insertion order.
    """

    def __init__(self, embeddings: EmbeddingSet):
        if len(embeddings) == 0:
            raise ConfigError("cannot index an empty embedding set")
        self.embeddings = embeddings
        self._unit = _unit_rows(embeddings.vectors)
        refs = embeddings.refs
        vids = np.array([r.volume_id for r in refs])
        vid_codes = np.searchsorted(np.unique(vids), vids)
        self._tiebreak = (
            np.array([r.patch_col for r in refs]),
            np.array([r.patch_row for r in refs]),
            np.array([r.slice_index for r in refs]),
            vid_codes,
        )

    def __len__(self) -> int:
        return len(self.embeddings)

    def similarities(self, query_vectors: np.ndarray) -> np.ndarray:
        """Cosine of each query row against every index row, float64 [m, n]."""
        query_vectors = np.atleast_2d(np.asarray(query_vectors))
        return _unit_rows(query_vectors) @ self._unit.T

    def rank_vectors(self, query_vectors: np.ndarray) -> np.ndarray:
        """Full index ranking per raw query row, best first: int [m, n]."""
        sims = self.similarities(query_vectors)
        cols, rows, slices, vid_codes = self._tiebreak
        out = np.empty(sims.shape, dtype=np.int64)
        for q in range(sims.shape[0]):
            out[q] = np.lexsort((cols, rows, slices, vid_codes, -sims[q]))
        return out

    def rank_all(self, queries: EmbeddingSet) -> np.ndarray:
        """Like rank_vectors, with the query set's model id checked first."""
        _require_same_model(queries, self.embeddings, "kNN search")
        return self.rank_vectors(queries.vectors)

    def search(self, queries: EmbeddingSet, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Top-k neighbors per query: (similarities [m, k], row indices [m, k])."""
        if not 1 <= k <= len(self):
            raise ConfigError(f"k must lie in [1, {len(self)}], got {k}")
        ranks = self.rank_all(queries)[:, :k]
        return np.take_along_axis(self.similarities(queries.vectors), ranks, axis=1), ranks
