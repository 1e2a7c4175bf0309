"""Retrieval-based selection of pool slices that match a validation set.

Every validation patch ranks the whole pool by embedding similarity. The
filter finds the smallest neighborhood depth k* at which the union of all
per-query top-k slices reaches the requested fraction of the pool, then
keeps exactly that union. The weighted variant additionally counts how many
query hits landed on each kept slice and assigns sqrt(count) as a training
weight, so slices that many validation patches retrieve count more.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, FormatError, MissingArtifactError
from .embeddings import EmbeddingSet, KNNIndex, PatchRef

CURATION_HEADER_KIND = "curation_params"


def knn(index: KNNIndex, query: np.ndarray, k: int) -> list[PatchRef]:
    """The k nearest pool patches to one query vector, best first.

    Ties in similarity are broken by (volume_id, slice_index, patch_row,
    patch_col), so the result is a total order independent of insertion
    order.
    """
    query = np.asarray(query)
    if query.ndim != 1:
        raise ConfigError(f"query must be a single vector, got shape {query.shape}")
    if not 1 <= k <= len(index):
        raise ConfigError(f"k must lie in [1, {len(index)}], got {k}")
    order = index.rank_vectors(query[None, :])[0, :k]
    return [index.embeddings.refs[i] for i in order]


@dataclass(frozen=True)
class SelectedSlice:
    volume_id: str
    slice_index: int
    weight: float


@dataclass
class SelectionResult:
    """Kept slices (lexicographic order) plus the depth that produced them."""

    entries: list[SelectedSlice]
    k_star: int
    retention: float
    weighted: bool

    def keys(self) -> set[tuple[str, int]]:
        return {(e.volume_id, e.slice_index) for e in self.entries}

    def weight_by_key(self) -> dict[tuple[str, int], float]:
        return {(e.volume_id, e.slice_index): e.weight for e in self.entries}


def _as_index(pool: EmbeddingSet | KNNIndex) -> KNNIndex:
    return pool if isinstance(pool, KNNIndex) else KNNIndex(pool)


def _slice_codes(index: KNNIndex) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Map each index row to a dense slice id; also return id -> slice key."""
    keys = [(r.volume_id, r.slice_index) for r in index.embeddings.refs]
    uniq = sorted(set(keys))
    lookup = {key: i for i, key in enumerate(uniq)}
    return np.array([lookup[k] for k in keys], dtype=np.int64), uniq


def _union_size(ranks: np.ndarray, codes: np.ndarray, k: int) -> int:
    return int(np.unique(codes[ranks[:, :k]]).size)


def find_depth(ranks: np.ndarray, codes: np.ndarray, n_pool_slices: int, retention: float) -> int:
    """Smallest k whose per-query top-k slice union covers the target fraction.

    The union size is non-decreasing in k and reaches the whole pool at
    k = pool size, so the binary search always terminates.
    """
    if not 0 < retention <= 1:
        raise ConfigError(f"retention must lie in (0, 1], got {retention}")
    target = retention * n_pool_slices
    lo, hi = 1, ranks.shape[1]
    while lo < hi:
        mid = (lo + hi) // 2
        if _union_size(ranks, codes, mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _run(
    pool: EmbeddingSet | KNNIndex, validation: EmbeddingSet, retention: float, weighted: bool
) -> SelectionResult:
    if len(validation) == 0:
        raise ConfigError("alignment filter needs at least one validation patch")
    index = _as_index(pool)
    codes, uniq = _slice_codes(index)
    ranks = index.rank_all(validation)
    k_star = find_depth(ranks, codes, len(uniq), retention)
    hit_codes = codes[ranks[:, :k_star]].ravel()
    if weighted:
        counts = np.bincount(hit_codes, minlength=len(uniq))
        entries = [
            SelectedSlice(vid, idx, float(np.sqrt(counts[c])))
            for c, (vid, idx) in enumerate(uniq)
            if counts[c] > 0
        ]
    else:
        entries = [SelectedSlice(*uniq[c], weight=1.0) for c in np.unique(hit_codes)]
    entries.sort(key=lambda e: (e.volume_id, e.slice_index))
    return SelectionResult(entries=entries, k_star=k_star, retention=retention, weighted=weighted)


def alignment_filter(
    pool: EmbeddingSet | KNNIndex, validation: EmbeddingSet, retention: float
) -> SelectionResult:
    """Keep the top-k* union with uniform weight 1."""
    return _run(pool, validation, retention, weighted=False)


def weighted_alignment_filter(
    pool: EmbeddingSet | KNNIndex, validation: EmbeddingSet, retention: float
) -> SelectionResult:
    """Keep the top-k* union, weighting each slice by sqrt(total query hits)."""
    return _run(pool, validation, retention, weighted=True)


def retention_report(result: SelectionResult, manifest: DatasetManifest) -> dict[str, float]:
    """Kept fraction per acquisition source; every manifest source appears."""
    by_key = manifest.by_key()
    totals: dict[str, int] = {}
    kept: dict[str, int] = {}
    for rec in manifest:
        totals[rec.source] = totals.get(rec.source, 0) + 1
        kept.setdefault(rec.source, 0)
    for e in result.entries:
        rec = by_key.get((e.volume_id, e.slice_index))
        if rec is None:
            raise FormatError(
                f"selected slice ({e.volume_id!r}, {e.slice_index}) is not in the manifest"
            )
        kept[rec.source] += 1
    return {src: kept[src] / totals[src] for src in sorted(totals)}


def write_curation(path, entries: list[SelectedSlice], params: dict) -> Path:
    """JSON-lines curation file: one params header, then one entry per slice."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": CURATION_HEADER_KIND, **params}
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for e in entries:
            f.write(
                json.dumps(
                    {"volume_id": e.volume_id, "slice_index": e.slice_index, "weight": e.weight},
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def read_curation(path) -> tuple[list[SelectedSlice], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such curation file: {path}")
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty curation file")
    header = json.loads(lines[0])
    if header.get("kind") != CURATION_HEADER_KIND:
        raise FormatError(f"{path}: first line is not a curation header")
    entries = [
        SelectedSlice(row["volume_id"], int(row["slice_index"]), float(row["weight"]))
        for row in map(json.loads, lines[1:])
    ]
    return entries, header


def save_selection(result: SelectionResult, path, extra_params: dict | None = None) -> Path:
    params = {
        "k_star": result.k_star,
        "retention": result.retention,
        "weighted": result.weighted,
    }
    if extra_params:
        params.update(extra_params)
    return write_curation(path, result.entries, params)


def load_selection(path) -> SelectionResult:
    entries, header = read_curation(path)
    try:
        return SelectionResult(
            entries=entries,
            k_star=int(header["k_star"]),
            retention=float(header["retention"]),
            weighted=bool(header["weighted"]),
        )
    except KeyError as e:
        raise FormatError(f"{path}: curation header is missing {e}") from None
