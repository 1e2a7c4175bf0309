"""End-to-end curation runs: staged, file-backed, and reproducible.

Every stage reads files written by earlier stages and writes its own under
the configured work directory, so any stage can be rerun or inspected in
isolation. All artifacts are deterministic functions of the config and the
input data; wall-clock information lives only in provenance.jsonl.

Work directory layout:

    recon/pool/<vid>.npy        reference magnitudes, [slice, ny, nx] float32
    recon/val_ref/<vid>.npy     same, for validation volumes
    recon/val_accel/<vid>.npy   undersampled reconstruction magnitudes
    foreground/{pool,val}/<vid>.npy   boolean anatomy masks
    heuristic.jsonl             per-slice screening scores and decisions
    patches/{pool,val}/         patch exports (patches.bin, refs.jsonl, meta.json)
    embeddings/{pool,val}.kemb  embedding files plus .zero.kemb siblings
    selection.jsonl             curated slice list with weights
    fdd.json                    distribution distances, curated and full pool
    metrics.jsonl               per-slice evaluation rows
    report.json                 aggregated result
    provenance.jsonl            one line per completed stage
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .alignment import alignment_filter, load_selection, save_selection, weighted_alignment_filter
from .config import RunConfig, config_hash, require_valid
from .dataset import DatasetManifest, load_volume
from .embeddings import (
    dedup_within_volume,
    extract_patches,
    read_embeddings,
    read_patch_dir,
    reject_empty,
    write_embeddings,
    write_patch_dir,
    zero_sibling_path,
)
from .errors import ConfigError, DegenerateInputError, MissingArtifactError
from .evaluation import SliceMetrics, build_metric_report, evaluate_slice
from .frechet import fdd_report
from .heuristics import screen_volume
from .recon import apply_mask, estimate_maps_lowfreq, foreground_mask, make_mask, mvue
from .toy import toy_embed, toy_zero_embedding

STAGES = (
    "recon_pool",
    "recon_val",
    "heuristic",
    "patches",
    "embed",
    "select",
    "fdd",
    "eval",
    "report",
)


def _mask_seed(seed: int, volume_id: str) -> int:
    """Stable per-volume offset stream id; adding volumes never shifts others."""
    digest = hashlib.sha256(f"{seed}:{volume_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _save_npy(path: Path, array: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, array)


def _load_npy(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(f"missing pipeline artifact {path}; run earlier stages first")
    return np.load(path)


def _normalized(magnitudes: np.ndarray, what: str) -> np.ndarray:
    """Scale a magnitude stack by its volume maximum."""
    peak = float(magnitudes.max())
    if peak <= 0:
        raise DegenerateInputError(f"{what}: volume is identically zero")
    return magnitudes / peak


class PipelineRun:
    """One configured run over a training pool and a validation target set."""

    def __init__(self, config: RunConfig):
        self.config = require_valid(config)
        self.hash = config_hash(config)
        self.workdir = Path(config.workdir)
        self.pool_manifest = DatasetManifest.load(config.pool_manifest)
        self.val_manifest = DatasetManifest.load(config.val_manifest)

    # ---- paths ----

    def _recon_dir(self, which: str) -> Path:
        return self.workdir / "recon" / which

    def _foreground_dir(self, which: str) -> Path:
        return self.workdir / "foreground" / which

    def _patch_dir(self, which: str) -> Path:
        return self.workdir / "patches" / which

    def _kemb_path(self, which: str) -> Path:
        return self.workdir / "embeddings" / f"{which}.kemb"

    @property
    def selection_path(self) -> Path:
        return self.workdir / "selection.jsonl"

    @property
    def report_path(self) -> Path:
        return self.workdir / "report.json"

    # ---- bookkeeping ----

    def _record(self, stage: str, inputs: list[Path], outputs: list[Path], started: float):
        def digests(paths):
            # workdir artifacts keyed relative, everything else absolute, so
            # the verifier can find both no matter where it runs from
            root = self.workdir.resolve()
            out = {}
            for p in sorted({Path(p).resolve() for p in paths}):
                key = str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
                out[key] = _sha256_file(p)
            return out

        row = {
            "stage": stage,
            "config_sha256": self.hash,
            "inputs": digests(inputs),
            "outputs": digests(outputs),
            "duration_s": round(time.monotonic() - started, 6),
            "completed_at": datetime.now(timezone.utc).isoformat(),
        }
        self.workdir.mkdir(parents=True, exist_ok=True)
        with open(self.workdir / "provenance.jsonl", "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def _map_volumes(self, volume_ids, fn):
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as ex:
                list(ex.map(fn, volume_ids))
        else:
            for vid in volume_ids:
                fn(vid)

    # ---- stages ----

    def recon_pool(self):
        """Fully sampled reference reconstruction of every pool volume."""
        started = time.monotonic()
        inputs = [Path(self.config.pool_manifest)]
        outputs: list[Path] = []

        def one(vid: str):
            container = self.pool_manifest.path_for(vid)
            inputs.append(container)
            vol = load_volume(container)
            mags, fgs = [], []
            for s in range(vol.n_slices):
                maps = estimate_maps_lowfreq(vol.data[s])
                mags.append(np.abs(mvue(vol.data[s], maps)))
                fgs.append(foreground_mask(maps))
            mag_path = self._recon_dir("pool") / f"{vid}.npy"
            fg_path = self._foreground_dir("pool") / f"{vid}.npy"
            _save_npy(mag_path, np.stack(mags).astype(np.float32))
            _save_npy(fg_path, np.stack(fgs))
            outputs.extend([mag_path, fg_path])

        self._map_volumes(self.pool_manifest.volume_ids(), one)
        self._record("recon_pool", inputs, outputs, started)

    def recon_val(self):
        """Reference and undersampled reconstructions of validation volumes.

        The column mask is drawn once per volume and shared by its slices.
        Sensitivities for the undersampled path are re-estimated from the
        masked data; the fully sampled center makes that well posed.
        """
        started = time.monotonic()
        inputs = [Path(self.config.val_manifest)]
        outputs: list[Path] = []
        accel = self.config.acceleration

        def one(vid: str):
            container = self.val_manifest.path_for(vid)
            inputs.append(container)
            vol = load_volume(container)
            mask = make_mask(vol.data.shape[-1], accel, seed=_mask_seed(self.config.seed, vid))
            # estimate maps for the undersampled path only from the mask's
            # fully sampled center, never from zeroed columns
            fraction = min(0.16, mask.center_fraction)
            refs, accels, fgs = [], [], []
            for s in range(vol.n_slices):
                maps = estimate_maps_lowfreq(vol.data[s])
                refs.append(np.abs(mvue(vol.data[s], maps)))
                fgs.append(foreground_mask(maps))
                masked = apply_mask(vol.data[s], mask)
                maps_u = estimate_maps_lowfreq(masked, fraction=fraction)
                accels.append(np.abs(mvue(masked, maps_u)))
            for sub, stack in (
                ("val_ref", np.stack(refs).astype(np.float32)),
                ("val_accel", np.stack(accels).astype(np.float32)),
            ):
                path = self._recon_dir(sub) / f"{vid}.npy"
                _save_npy(path, stack)
                outputs.append(path)
            fg_path = self._foreground_dir("val") / f"{vid}.npy"
            _save_npy(fg_path, np.stack(fgs))
            outputs.append(fg_path)

        self._map_volumes(self.val_manifest.volume_ids(), one)
        self._record("recon_val", inputs, outputs, started)

    def heuristic(self):
        """Screen pool slices; disabled runs keep everything, scores omitted."""
        started = time.monotonic()
        path = self.workdir / "heuristic.jsonl"
        inputs: list[Path] = []
        rows = []
        for vid in self.pool_manifest.volume_ids():
            indices = [r.slice_index for r in self.pool_manifest.records_for(vid)]
            if self.config.use_heuristic:
                mag_path = self._recon_dir("pool") / f"{vid}.npy"
                inputs.append(mag_path)
                report = screen_volume(_load_npy(mag_path), self.config.thresholds.heuristic())
                for idx in indices:
                    rows.append(
                        {
                            "volume_id": vid,
                            "slice_index": idx,
                            "energy": float(report.energy[idx]),
                            "edge": float(report.edges[idx]),
                            "keep": bool(report.keep[idx]),
                        }
                    )
            else:
                for idx in indices:
                    rows.append(
                        {
                            "volume_id": vid,
                            "slice_index": idx,
                            "energy": None,
                            "edge": None,
                            "keep": True,
                        }
                    )
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        self._record("heuristic", inputs, [path], started)

    def _kept_pool_slices(self) -> dict[str, list[int]]:
        path = self.workdir / "heuristic.jsonl"
        if not path.exists():
            raise MissingArtifactError(f"missing {path}; run the heuristic stage first")
        kept: dict[str, list[int]] = {}
        with open(path) as f:
            for ln in f:
                row = json.loads(ln)
                if row["keep"]:
                    kept.setdefault(row["volume_id"], []).append(row["slice_index"])
        return kept

    def patches(self):
        """Tile surviving pool slices and all validation slices into patches.

        Each volume's magnitudes are normalized by their volume maximum
        before tiling, so patch intensities are comparable across volumes.
        """
        started = time.monotonic()
        kept = self._kept_pool_slices()
        jobs = (
            ("pool", "pool", {v: kept.get(v, []) for v in self.pool_manifest.volume_ids()}),
            (
                "val",
                "val_ref",
                {
                    v: [r.slice_index for r in self.val_manifest.records_for(v)]
                    for v in self.val_manifest.volume_ids()
                },
            ),
        )
        inputs: list[Path] = [self.workdir / "heuristic.jsonl"]
        outputs = []
        for which, recon_sub, by_vid in jobs:
            all_patches, all_refs = [], []
            for vid in sorted(by_vid):
                if not by_vid[vid]:
                    continue
                mag_path = self._recon_dir(recon_sub) / f"{vid}.npy"
                inputs.append(mag_path)
                mags = _normalized(_load_npy(mag_path), vid)
                for idx in sorted(by_vid[vid]):
                    p, r = extract_patches(mags[idx], vid, idx)
                    all_patches.append(p)
                    all_refs.extend(r)
            stack = (
                np.concatenate(all_patches)
                if all_patches
                else np.empty((0, 128, 128), dtype=np.float32)
            )
            out = write_patch_dir(self._patch_dir(which), stack, all_refs)
            outputs.extend([out / "patches.bin", out / "refs.jsonl", out / "meta.json"])
        self._record("patches", inputs, outputs, started)

    def embed(self):
        """Turn both patch exports into embedding files (toy or external)."""
        started = time.monotonic()
        inputs: list[Path] = []
        outputs = []
        if self.config.embedder == "toy":
            dim, seed = self.config.embed_dim, self.config.seed
            for which in ("pool", "val"):
                patch_dir = self._patch_dir(which)
                inputs.extend([patch_dir / "patches.bin", patch_dir / "refs.jsonl"])
                patches, refs = read_patch_dir(patch_dir)
                out = self._kemb_path(which)
                outputs.append(write_embeddings(toy_embed(patches, refs, dim=dim, seed=seed), out))
                outputs.append(
                    write_embeddings(toy_zero_embedding(dim=dim, seed=seed), zero_sibling_path(out))
                )
        else:
            pairs = (
                ("pool", self.config.external_pool_embeddings),
                ("val", self.config.external_val_embeddings),
            )
            model_ids = set()
            for which, src in pairs:
                src = Path(src)
                model_ids.add(read_embeddings(src).model_id)
                zero_src = zero_sibling_path(src)
                if not zero_src.exists():
                    raise MissingArtifactError(
                        f"external embeddings {src} have no zero reference {zero_src}"
                    )
                inputs.extend([src, zero_src])
                dst = self._kemb_path(which)
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, dst)
                shutil.copyfile(zero_src, zero_sibling_path(dst))
                outputs.extend([dst, zero_sibling_path(dst)])
            if len(model_ids) != 1:
                raise ConfigError(f"pool/val embeddings come from different models: {model_ids}")
        self._record("embed", inputs, outputs, started)

    def _clean_embeddings(self):
        pool = read_embeddings(self._kemb_path("pool"))
        zero = read_embeddings(zero_sibling_path(self._kemb_path("pool")))
        val = read_embeddings(self._kemb_path("val"))
        thr = self.config.thresholds
        pool_clean = dedup_within_volume(reject_empty(pool, zero, thr.empty), thr.dedup)
        val_clean = reject_empty(val, zero, thr.empty)
        return pool_clean, val_clean

    def _embedding_inputs(self) -> list[Path]:
        pool = self._kemb_path("pool")
        return [pool, zero_sibling_path(pool), self._kemb_path("val")]

    def select(self):
        """Choose the curated slice set by validation-patch retrieval."""
        started = time.monotonic()
        pool_clean, val_clean = self._clean_embeddings()
        run = weighted_alignment_filter if self.config.mode == "weighted" else alignment_filter
        result = run(pool_clean, val_clean, self.config.retention)
        save_selection(
            result,
            self.selection_path,
            extra_params={
                "config_sha256": self.hash,
                "mode": self.config.mode,
                "seed": self.config.seed,
                "thresholds": {
                    "empty": self.config.thresholds.empty,
                    "dedup": self.config.thresholds.dedup,
                },
            },
        )
        self._record("select", self._embedding_inputs(), [self.selection_path], started)

    def fdd(self):
        """Distribution distance of the curated set (and full pool) to the target."""
        started = time.monotonic()
        pool_clean, val_clean = self._clean_embeddings()
        selected = load_selection(self.selection_path).keys()
        rows = [
            i
            for i, r in enumerate(pool_clean.refs)
            if (r.volume_id, r.slice_index) in selected
        ]
        out = {
            "selected": fdd_report(pool_clean.subset(rows), val_clean),
            "full_pool": fdd_report(pool_clean, val_clean),
        }
        path = self.workdir / "fdd.json"
        with open(path, "w") as f:
            json.dump(out, f, sort_keys=True, indent=2)
            f.write("\n")
        self._record("fdd", self._embedding_inputs() + [self.selection_path], [path], started)

    def eval(self):
        """Score undersampled validation reconstructions against references."""
        started = time.monotonic()
        path = self.workdir / "metrics.jsonl"
        inputs: list[Path] = []
        with open(path, "w") as f:
            for vid in self.val_manifest.volume_ids():
                ref_path = self._recon_dir("val_ref") / f"{vid}.npy"
                acc_path = self._recon_dir("val_accel") / f"{vid}.npy"
                fg_path = self._foreground_dir("val") / f"{vid}.npy"
                inputs.extend([ref_path, acc_path, fg_path])
                ref, acc, fg = _load_npy(ref_path), _load_npy(acc_path), _load_npy(fg_path)
                for rec in self.val_manifest.records_for(vid):
                    m = evaluate_slice(
                        acc[rec.slice_index],
                        ref[rec.slice_index],
                        fg[rec.slice_index],
                        volume_id=vid,
                        slice_index=rec.slice_index,
                        distribution_key=rec.distribution_key(),
                    )
                    f.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")
        self._record("eval", inputs, [path], started)

    def report(self):
        """Fold metrics, distances, and selection stats into report.json."""
        started = time.monotonic()
        metrics_path = self.workdir / "metrics.jsonl"
        if not metrics_path.exists():
            raise MissingArtifactError(f"missing {metrics_path}; run the eval stage first")
        with open(metrics_path) as f:
            rows = [SliceMetrics.from_dict(json.loads(ln)) for ln in f if ln.strip()]
        metric_report = build_metric_report(rows, seed=self.config.seed)
        selection = load_selection(self.selection_path)
        fdd_path = self.workdir / "fdd.json"
        if not fdd_path.exists():
            raise MissingArtifactError(f"missing {fdd_path}; run the fdd stage first")
        pool_meta = json.loads((self._patch_dir("pool") / "meta.json").read_text())
        val_meta = json.loads((self._patch_dir("val") / "meta.json").read_text())
        report = {
            "config_sha256": self.hash,
            "counts": {
                "pool_slices": len(self.pool_manifest),
                "pool_slices_screened": sum(len(v) for v in self._kept_pool_slices().values()),
                "pool_patches": pool_meta["count"],
                "val_slices": len(self.val_manifest),
                "val_patches": val_meta["count"],
                "selected_slices": len(selection.entries),
            },
            "selection": {
                "mode": self.config.mode,
                "retention": selection.retention,
                "k_star": selection.k_star,
                "weighted": selection.weighted,
            },
            # the anatomy mask is a declared decision, not a tuned quantity
            "foreground": {
                "maps": "lowfreq_center",
                "threshold_relative": 0.5,
                "closing_passes": 1,
            },
            "fdd": json.loads(fdd_path.read_text()),
            "metrics": metric_report,
        }
        with open(self.report_path, "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        self._record(
            "report",
            [metrics_path, fdd_path, self.selection_path],
            [self.report_path],
            started,
        )
        return self.report_path

    def run(self) -> Path:
        for stage in STAGES:
            getattr(self, stage)()
        return self.report_path


def run_pipeline(config: RunConfig) -> Path:
    """Run every stage in order; returns the report path."""
    return PipelineRun(config).run()


def verify_provenance(workdir) -> list[str]:
    """Check the recorded hash chain against itself and the files on disk.

    Two kinds of problems are reported: a stage that read an artifact whose
    recorded input hash disagrees with the hash its producing stage wrote
    (stale rerun), and an artifact whose current bytes no longer match the
    last hash recorded for it (tampering or out-of-band edits). Returns one
    human-readable line per problem; an empty list means the chain holds.
    """
    workdir = Path(workdir)
    path = workdir / "provenance.jsonl"
    if not path.exists():
        raise MissingArtifactError(f"no provenance record at {path}")
    expected: dict[str, str] = {}
    problems = []
    with open(path) as f:
        for ln in f:
            row = json.loads(ln)
            for rel, digest in row["inputs"].items():
                if rel in expected and expected[rel] != digest:
                    problems.append(
                        f"stage {row['stage']} read {rel} before its producer's latest rerun"
                    )
                expected.setdefault(rel, digest)
            expected.update(row["outputs"])
    for rel, digest in sorted(expected.items()):
        p = Path(rel) if Path(rel).is_absolute() else workdir / rel
        if not p.exists():
            problems.append(f"recorded artifact {rel} is missing")
        elif _sha256_file(p) != digest:
            problems.append(f"artifact {rel} changed after its last recorded write")
    return problems
