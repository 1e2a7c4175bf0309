import numpy as np
import pytest

from kcurate.dataset import DatasetManifest, SliceRecord
from kcurate.embeddings import EmbeddingSet, PatchRef
from kcurate.rng import philox


def make_refs(n, volume_id="vol", slice_index=0):
    return [PatchRef(volume_id, slice_index, 0, i) for i in range(n)]


def make_set(vectors, refs=None, model_id="toy/test"):
    vectors = np.asarray(vectors, dtype=np.float32)
    if refs is None:
        refs = make_refs(vectors.shape[0])
    return EmbeddingSet(vectors=vectors, refs=refs, model_id=model_id)


def random_unit_rows(n, d, seed=0):
    g = philox(seed, 0xBEEF)
    rows = g.normal(size=(n, d))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


def record(volume_id, slice_index, source="siteA", anatomy="knee", contrast="pd"):
    return SliceRecord(
        volume_id=volume_id,
        slice_index=slice_index,
        source=source,
        anatomy=anatomy,
        view="axial",
        contrast=contrast,
        field_strength_tesla=3.0,
        coil_count=4,
    )


@pytest.fixture
def tiny_manifest(tmp_path):
    records = [record("a", 0), record("a", 1), record("b", 0, source="siteB")]
    return DatasetManifest(records=records, volume_paths={"a": "a.h5", "b": "b.h5"})
