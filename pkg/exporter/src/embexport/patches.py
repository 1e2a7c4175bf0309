"""Reader for the curation CLI's patch export directory.

Layout: ``meta.json`` (count, patch_size, dtype), ``patches.bin`` (count *
size * size float32, little-endian, row-major), ``refs.jsonl`` (one
provenance line per patch, same order as the binary block).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ExportError
from .kemb import PatchRef


def read_patch_dir(directory) -> tuple[np.ndarray, list[PatchRef]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ExportError(f"no patch export at {directory} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype") != "float32":
        raise ExportError(f"{directory}: unsupported patch dtype {meta.get('dtype')!r}")
    n, size = int(meta["count"]), int(meta["patch_size"])
    raw = (directory / "patches.bin").read_bytes()
    if len(raw) != 4 * n * size * size:
        raise ExportError(
            f"{directory}: patches.bin holds {len(raw)} bytes, expected {4 * n * size * size}"
        )
    patches = np.frombuffer(raw, dtype="<f4").reshape(n, size, size).copy()
    with open(directory / "refs.jsonl") as f:
        refs = [PatchRef.from_json(ln) for ln in f if ln.strip()]
    if len(refs) != n:
        raise ExportError(f"{directory}: {n} patches but {len(refs)} ref lines")
    return patches, refs
