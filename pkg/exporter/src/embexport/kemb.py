"""KEMB embedding-file writer.

Byte layout (all little-endian): magic ``KEMB``; u32 version = 1; u32 row
count n; u32 dimension d; u16 model-id byte length + UTF-8 model id; n*d
float32 row-major; u64 refs byte length + JSON-lines refs, one object per
row in row order with keys volume_id, slice_index, patch_row, patch_col.
The model id goes into the header verbatim so downstream consumers can
refuse to mix embeddings from different models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ExportError

KEMB_MAGIC = b"KEMB"
KEMB_VERSION = 1


@dataclass(frozen=True)
class PatchRef:
    """Provenance of one embedded patch."""

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


def write_kemb(path, vectors: np.ndarray, refs: list[PatchRef], model_id: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ExportError(f"embedding matrix must be [n, d], got shape {vectors.shape}")
    if vectors.shape[0] != len(refs):
        raise ExportError(f"{vectors.shape[0]} embedding rows but {len(refs)} refs")
    model_bytes = model_id.encode("utf-8")
    if len(model_bytes) > 0xFFFF:
        raise ExportError("model id longer than 65535 bytes")
    refs_bytes = "".join(r.to_json() + "\n" for r in refs).encode("utf-8")
    with open(path, "wb") as f:
        f.write(KEMB_MAGIC)
        f.write(struct.pack("<III", KEMB_VERSION, vectors.shape[0], vectors.shape[1]))
        f.write(struct.pack("<H", len(model_bytes)))
        f.write(model_bytes)
        f.write(vectors.tobytes(order="C"))
        f.write(struct.pack("<Q", len(refs_bytes)))
        f.write(refs_bytes)
    return path


def zero_sibling_path(path) -> Path:
    """Companion file holding the model's embedding of an all-zero patch."""
    path = Path(path)
    return path.with_name(path.stem + ".zero.kemb")
