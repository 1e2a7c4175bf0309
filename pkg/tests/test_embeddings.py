"""Embedding interchange format, patch tiling, cleanup filters, exact kNN.

The binary format test pins the exact byte layout against a hand-packed
buffer, since an external exporter must be able to produce files this
package reads. The kNN oracle is an independent per-query scan with
python-level sorting.
"""

import json
import struct

import numpy as np
import pytest
from conftest import make_refs, make_set, random_unit_rows
from hypothesis import given, settings
from hypothesis import strategies as st

from kcurate.embeddings import (
    EmbeddingSet,
    KNNIndex,
    PatchRef,
    cosine_matrix,
    dedup_within_volume,
    extract_patches,
    read_embeddings,
    read_patch_dir,
    reject_empty,
    write_embeddings,
    write_patch_dir,
    zero_sibling_path,
)
from kcurate.errors import (
    ConfigError,
    FormatError,
    MissingArtifactError,
    ModelMismatchError,
    ShapeMismatchError,
)
from kcurate.rng import philox


class TestFormat:
    def test_byte_layout_matches_hand_packed_file(self, tmp_path):
        vectors = np.array([[1.5, -2.0]], dtype=np.float32)
        refs = [PatchRef("v", 3, 0, 1)]
        path = write_embeddings(make_set(vectors, refs, model_id="m"), tmp_path / "x.kemb")
        ref_line = (refs[0].to_json() + "\n").encode()
        expected = (
            b"KEMB"
            + struct.pack("<III", 1, 1, 2)
            + struct.pack("<H", 1)
            + b"m"
            + vectors.astype("<f4").tobytes()
            + struct.pack("<Q", len(ref_line))
            + ref_line
        )
        assert path.read_bytes() == expected

    def test_roundtrip_bit_exact(self, tmp_path):
        vectors = philox(3, 0xF0).normal(size=(7, 5)).astype(np.float32)
        refs = [PatchRef(f"vol{i % 2}", i, i // 3, i % 3) for i in range(7)]
        original = make_set(vectors, refs, model_id="toy/rp-v1")
        loaded = read_embeddings(write_embeddings(original, tmp_path / "e.kemb"))
        assert loaded.vectors.tobytes() == original.vectors.tobytes()
        assert loaded.refs == original.refs
        assert loaded.model_id == original.model_id

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.integers(0, 12),
        d=st.integers(1, 40),
        model_id=st.text(max_size=24),
        seed=st.integers(0, 2**16),
    )
    def test_roundtrip_random(self, tmp_path_factory, n, d, model_id, seed):
        vectors = philox(seed, 0xF1).normal(size=(n, d)).astype(np.float32)
        refs = [PatchRef(f"v{i}", seed % 7, i, 2 * i) for i in range(n)]
        original = EmbeddingSet(vectors=vectors, refs=refs, model_id=model_id)
        path = tmp_path_factory.mktemp("kemb") / "e.kemb"
        loaded = read_embeddings(write_embeddings(original, path))
        assert loaded.vectors.tobytes() == original.vectors.tobytes()
        assert loaded.refs == original.refs
        assert loaded.model_id == original.model_id

    def test_reads_wide_rows(self, tmp_path):
        # the externally produced files carry 1792-wide rows
        vectors = philox(9, 0xF2).normal(size=(6, 1792)).astype(np.float32)
        original = make_set(vectors, make_refs(6), model_id="dreamsim/open_clip_vitb32")
        loaded = read_embeddings(write_embeddings(original, tmp_path / "wide.kemb"))
        assert loaded.dim == 1792
        assert np.array_equal(loaded.vectors, original.vectors)

    def test_truncation_detected(self, tmp_path):
        path = write_embeddings(
            make_set(np.ones((3, 4), np.float32)), tmp_path / "t.kemb"
        )
        raw = path.read_bytes()
        for cut in (2, 10, 18, 30, len(raw) - 1):
            clipped = tmp_path / f"cut{cut}.kemb"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(FormatError, match="truncated"):
                read_embeddings(clipped)

    def test_bad_magic_rejected(self, tmp_path):
        path = write_embeddings(
            make_set(np.ones((1, 2), np.float32)), tmp_path / "m.kemb"
        )
        raw = path.read_bytes()
        bad = tmp_path / "bad.kemb"
        bad.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            read_embeddings(bad)

    def test_unknown_version_rejected(self, tmp_path):
        path = write_embeddings(
            make_set(np.ones((1, 2), np.float32)), tmp_path / "v.kemb"
        )
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        bad = tmp_path / "bad.kemb"
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_embeddings(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_embeddings(tmp_path / "absent.kemb")

    def test_ref_count_mismatch_rejected(self, tmp_path):
        # two rows, but a refs block holding only one line
        good = make_set(np.ones((2, 2), np.float32))
        payload = (good.refs[0].to_json() + "\n").encode()
        rebuilt = (
            b"KEMB"
            + struct.pack("<III", 1, 2, 2)
            + struct.pack("<H", len(good.model_id.encode()))
            + good.model_id.encode()
            + good.vectors.astype("<f4").tobytes()
            + struct.pack("<Q", len(payload))
            + payload
        )
        bad = tmp_path / "short.kemb"
        bad.write_bytes(rebuilt)
        with pytest.raises(FormatError, match="ref lines"):
            read_embeddings(bad)

    def test_zero_sibling_path(self):
        assert zero_sibling_path("out/pool.kemb").name == "pool.zero.kemb"
        assert zero_sibling_path("out/pool.kemb").parent.name == "out"


class TestEmbeddingSet:
    def test_rejects_rank_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            EmbeddingSet(vectors=np.ones(3), refs=make_refs(3), model_id="m")

    def test_rejects_ref_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            EmbeddingSet(vectors=np.ones((3, 2)), refs=make_refs(2), model_id="m")

    def test_subset_keeps_alignment(self):
        s = make_set(np.arange(12, dtype=np.float32).reshape(4, 3))
        sub = s.subset([2, 0])
        assert np.array_equal(sub.vectors, s.vectors[[2, 0]])
        assert sub.refs == [s.refs[2], s.refs[0]]
        assert sub.model_id == s.model_id

    def test_cosine_handles_zero_rows(self):
        sims = cosine_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2))
        assert sims[0, 0] == 0.0 and sims[0, 1] == 0.0
        assert sims[1, 0] == 1.0


class TestExtractPatches:
    def test_grid_tiling_raster_order(self):
        img = philox(1, 0xA0).random((256, 384)).astype(np.float32)
        patches, refs = extract_patches(img, "v", 5)
        assert patches.shape == (6, 128, 128)
        assert [(r.patch_row, r.patch_col) for r in refs] == [
            (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2),
        ]
        for p, r in zip(patches, refs):
            block = img[
                r.patch_row * 128 : (r.patch_row + 1) * 128,
                r.patch_col * 128 : (r.patch_col + 1) * 128,
            ]
            assert np.array_equal(p, block)
        assert all(r.volume_id == "v" and r.slice_index == 5 for r in refs)

    def test_exact_size_is_identity(self):
        img = philox(2, 0xA0).random((128, 128)).astype(np.float32)
        patches, refs = extract_patches(img, "v", 0)
        assert patches.shape == (1, 128, 128)
        assert np.array_equal(patches[0], img)
        assert refs == [PatchRef("v", 0, 0, 0)]

    def test_partial_tails_dropped(self):
        img = philox(3, 0xA0).random((200, 200)).astype(np.float32)
        patches, refs = extract_patches(img, "v", 0)
        assert patches.shape == (1, 128, 128)
        assert np.array_equal(patches[0], img[:128, :128])

    def test_small_image_padded_symmetrically(self):
        img = philox(4, 0xA0).random((64, 100)).astype(np.float32)
        patches, _ = extract_patches(img, "v", 0)
        assert patches.shape == (1, 128, 128)
        assert np.array_equal(patches[0][32:96, 14:114], img)
        total = patches[0].sum(dtype=np.float64)
        assert total == pytest.approx(img.sum(dtype=np.float64), rel=1e-6)
        border = patches[0].copy()
        border[32:96, 14:114] = 0
        assert not border.any()

    def test_one_short_axis_padded_other_tiled(self):
        img = philox(5, 0xA0).random((64, 300)).astype(np.float32)
        patches, refs = extract_patches(img, "v", 0)
        assert patches.shape == (2, 128, 128)
        assert [(r.patch_row, r.patch_col) for r in refs] == [(0, 0), (0, 1)]

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeMismatchError):
            extract_patches(np.zeros(64), "v", 0)


class TestPatchDir:
    def test_roundtrip_bit_exact(self, tmp_path):
        patches = philox(6, 0xA1).random((5, 32, 32)).astype(np.float32)
        refs = make_refs(5, volume_id="w")
        out = write_patch_dir(tmp_path / "export", patches, refs)
        meta = json.loads((out / "meta.json").read_text())
        assert meta == {"count": 5, "patch_size": 32, "dtype": "float32"}
        loaded, loaded_refs = read_patch_dir(out)
        assert loaded.tobytes() == patches.tobytes()
        assert loaded_refs == refs

    def test_ref_count_must_match(self, tmp_path):
        with pytest.raises(ShapeMismatchError):
            write_patch_dir(tmp_path / "e", np.zeros((3, 8, 8)), make_refs(2))

    def test_corrupt_payload_detected(self, tmp_path):
        out = write_patch_dir(
            tmp_path / "e", np.zeros((2, 8, 8), np.float32), make_refs(2)
        )
        payload = out / "patches.bin"
        payload.write_bytes(payload.read_bytes()[:-4])
        with pytest.raises(FormatError, match="bytes"):
            read_patch_dir(out)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_patch_dir(tmp_path / "nowhere")


def oblique(toward, cosine, ortho):
    """Unit vector at the given cosine to ``toward``, leaning along ``ortho``."""
    return cosine * toward + np.sqrt(1 - cosine**2) * ortho


class TestRejectEmpty:
    def zero_ref(self, d=4):
        v = np.zeros((1, d), np.float32)
        v[0, 0] = 1.0
        return make_set(v, [PatchRef("zero", 0, 0, 0)])

    def test_threshold_separates_below_from_above(self):
        e0, e1 = np.eye(4, dtype=np.float64)[:2]
        vectors = np.stack([oblique(e0, 0.59, e1), oblique(e0, 0.61, e1)])
        kept = reject_empty(make_set(vectors), self.zero_ref(), threshold=0.6)
        assert len(kept) == 1
        assert kept.refs[0].patch_col == 0

    def test_orthogonal_rows_all_kept(self):
        kept = reject_empty(make_set(np.eye(4)[1:]), self.zero_ref())
        assert len(kept) == 3

    def test_idempotent(self):
        rows = random_unit_rows(20, 4, seed=7)
        once = reject_empty(make_set(rows), self.zero_ref())
        twice = reject_empty(once, self.zero_ref())
        assert np.array_equal(once.vectors, twice.vectors)
        assert once.refs == twice.refs

    def test_model_mismatch_refused(self):
        other = make_set(np.ones((1, 4)), model_id="other/model")
        with pytest.raises(ModelMismatchError):
            reject_empty(make_set(np.ones((2, 4))), other)

    def test_reference_must_be_single_row(self):
        bad = make_set(np.ones((2, 4)))
        with pytest.raises(ConfigError):
            reject_empty(make_set(np.ones((2, 4))), bad)


class TestDedup:
    def chain_set(self):
        # cos(a,b)=0.95 and cos(b,c)=0.95 but cos(a,c)=0.85: greedy keeps a
        # and c because b, the bridge, is dropped before c is visited
        e = np.eye(3, dtype=np.float64)
        a = e[0]
        b = oblique(a, 0.95, e[1])
        y = 0.95 * (1 - 0.85) / np.sqrt(1 - 0.95**2)
        c = 0.85 * e[0] + y * e[1] + np.sqrt(1 - 0.85**2 - y**2) * e[2]
        refs = [PatchRef("v", i, 0, 0) for i in range(3)]
        return make_set(np.stack([a, b, c]), refs)

    def test_chain_keeps_endpoints(self):
        s = self.chain_set()
        sims = cosine_matrix(s.vectors, s.vectors)
        assert sims[0, 1] == pytest.approx(0.95, abs=1e-6)
        assert sims[1, 2] == pytest.approx(0.95, abs=1e-6)
        assert sims[0, 2] == pytest.approx(0.85, abs=1e-6)
        kept = dedup_within_volume(s, threshold=0.9)
        assert [r.slice_index for r in kept.refs] == [0, 2]

    def test_matches_exhaustive_simulation(self):
        g = philox(21, 0xD0)
        for trial in range(20):
            n = int(g.integers(2, 30))
            base = g.normal(size=(max(2, n // 4), 6))
            picks = g.integers(0, base.shape[0], size=n)
            rows = base[picks] + 0.05 * g.normal(size=(n, 6))
            refs = [
                PatchRef(f"v{int(g.integers(0, 3))}", int(g.integers(0, 4)), i, 0)
                for i in range(n)
            ]
            s = make_set(rows, refs)
            unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            expected = []
            for vid in {r.volume_id for r in refs}:
                mine = [i for i in range(n) if refs[i].volume_id == vid]
                mine.sort(
                    key=lambda i: (refs[i].slice_index, refs[i].patch_row, refs[i].patch_col)
                )
                kept_here = []
                for i in mine:
                    if all(unit[j] @ unit[i] <= 0.9 for j in kept_here):
                        kept_here.append(i)
                expected.extend(kept_here)
            got = dedup_within_volume(s, threshold=0.9)
            assert sorted(got.refs) == sorted(refs[i] for i in expected), f"trial {trial}"

    def test_identical_rows_in_different_volumes_survive(self):
        rows = np.tile(np.array([1.0, 0.0, 0.0]), (2, 1))
        refs = [PatchRef("a", 0, 0, 0), PatchRef("b", 0, 0, 0)]
        kept = dedup_within_volume(make_set(rows, refs))
        assert len(kept) == 2

    def test_visit_order_set_by_refs_not_storage(self):
        s = self.chain_set()
        shuffled = s.subset([2, 0, 1])
        kept = dedup_within_volume(shuffled, threshold=0.9)
        assert sorted(r.slice_index for r in kept.refs) == [0, 2]

    def test_idempotent(self):
        rows = random_unit_rows(40, 5, seed=3)
        refs = [PatchRef("v", i // 8, i % 8, 0) for i in range(40)]
        once = dedup_within_volume(make_set(rows, refs), threshold=0.95)
        twice = dedup_within_volume(once, threshold=0.95)
        assert once.refs == twice.refs

    def test_higher_threshold_keeps_at_least_as_many(self):
        rows = random_unit_rows(60, 3, seed=5)
        refs = [PatchRef("v", i, 0, 0) for i in range(60)]
        s = make_set(rows, refs)
        strict = len(dedup_within_volume(s, threshold=0.8))
        loose = len(dedup_within_volume(s, threshold=0.95))
        assert loose >= strict

    def test_row_scaling_changes_nothing(self):
        rows = random_unit_rows(25, 4, seed=9)
        refs = [PatchRef("v", i, 0, 0) for i in range(25)]
        scales = philox(2, 0xD1).uniform(0.1, 10.0, size=(25, 1))
        plain = dedup_within_volume(make_set(rows, refs), threshold=0.9)
        scaled = dedup_within_volume(make_set(rows * scales, refs), threshold=0.9)
        assert plain.refs == scaled.refs


class TestKNN:
    def build(self, n, d, seed, volumes=4):
        g = philox(seed, 0xB0)
        vectors = g.normal(size=(n, d)).astype(np.float32)
        refs = [
            PatchRef(f"v{i % volumes}", i // volumes, int(g.integers(0, 3)), int(g.integers(0, 3)))
            for i in range(n)
        ]
        # refs must be distinct for the tie-break to be a total order
        refs = [
            PatchRef(r.volume_id, r.slice_index, r.patch_row, i)
            for i, r in enumerate(refs)
        ]
        return make_set(vectors, refs)

    def oracle_order(self, index_set, query):
        unit = index_set.vectors.astype(np.float64)
        unit = unit / np.linalg.norm(unit, axis=1, keepdims=True)
        q = np.asarray(query, np.float64)
        q = q / np.linalg.norm(q)
        sims = unit @ q
        def key(i):
            r = index_set.refs[i]
            return (-sims[i], r.volume_id, r.slice_index, r.patch_row, r.patch_col)
        return sorted(range(len(sims)), key=key), sims

    def test_matches_scan_oracle(self):
        index_set = self.build(200, 16, seed=1)
        index = KNNIndex(index_set)
        queries = philox(2, 0xB1).normal(size=(50, 16)).astype(np.float32)
        ranks = index.rank_vectors(queries)
        sims, top = index.search(make_set(queries, make_refs(50)), k=20)
        for qi in range(50):
            expected, oracle_sims = self.oracle_order(index_set, queries[qi])
            assert ranks[qi].tolist() == expected
            for k in (1, 5, 20):
                assert top[qi, :k].tolist() == expected[:k]
            assert np.allclose(sims[qi], [oracle_sims[i] for i in expected[:20]], atol=1e-12)

    def test_random_instances(self):
        for seed, n, d in ((3, 7, 2), (4, 64, 8), (5, 500, 5), (6, 1000, 3)):
            index_set = self.build(n, d, seed=seed)
            index = KNNIndex(index_set)
            queries = philox(seed, 0xB2).normal(size=(5, d)).astype(np.float32)
            ranks = index.rank_vectors(queries)
            for qi in range(5):
                expected, _ = self.oracle_order(index_set, queries[qi])
                assert ranks[qi].tolist() == expected

    def test_self_query_ranks_itself_first(self):
        index_set = self.build(30, 6, seed=8)
        index = KNNIndex(index_set)
        _, top = index.search(index_set, k=1)
        assert top[:, 0].tolist() == list(range(30))

    def test_exact_ties_broken_by_reference(self):
        rows = np.tile(np.array([0.6, 0.8], np.float32), (4, 1))
        refs = [
            PatchRef("b", 0, 0, 0),
            PatchRef("a", 1, 0, 0),
            PatchRef("a", 0, 1, 0),
            PatchRef("a", 0, 0, 2),
        ]
        index = KNNIndex(EmbeddingSet(vectors=rows, refs=refs, model_id="m"))
        order = index.rank_vectors(np.array([0.6, 0.8]))[0].tolist()
        assert order == [3, 2, 1, 0]

    def test_k_bounds(self):
        index = KNNIndex(self.build(5, 3, seed=10))
        queries = make_set(np.ones((1, 3), np.float32), make_refs(1))
        with pytest.raises(ConfigError):
            index.search(queries, k=0)
        with pytest.raises(ConfigError):
            index.search(queries, k=6)

    def test_model_mismatch(self):
        index = KNNIndex(self.build(5, 3, seed=11))
        foreign = make_set(np.ones((1, 3), np.float32), make_refs(1), model_id="x/y")
        with pytest.raises(ModelMismatchError):
            index.search(foreign, k=1)

    def test_empty_index_refused(self):
        empty = EmbeddingSet(
            vectors=np.empty((0, 3), np.float32), refs=[], model_id="m"
        )
        with pytest.raises(ConfigError):
            KNNIndex(empty)
