"""Command-line entry points.

Every subcommand accepts ``--config FILE``: a JSON object keyed by the
subcommand's option names whose values override whatever was passed on the
command line, so a run can be pinned to one declarative document. Exit
codes: 0 success, 2 bad usage or config, 3 missing artifact, 4 numeric
failure.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import __version__
from .alignment import (
    alignment_filter,
    retention_report,
    save_selection,
    weighted_alignment_filter,
    write_curation,
)
from .config import load_config
from .dataset import DatasetManifest, build_manifest, load_volume, read_sidecar
from .embeddings import PATCH_SIZE, extract_patches, read_embeddings, write_patch_dir
from .errors import ConfigError, FormatError, KcurateError, MissingArtifactError
from .evaluation import METRIC_NAMES, build_metric_report, evaluate_slice
from .frechet import fdd_report
from .heuristics import HeuristicThresholds, heuristic_filter
from .phantom import write_corpus
from .pipeline import _mask_seed, _normalized, run_pipeline, verify_provenance
from .recon import (
    RECON_METHODS,
    apply_mask,
    estimate_maps_lowfreq,
    foreground_mask,
    make_mask,
    mvue,
    reconstruct,
)

_path = click.Path(path_type=Path)


def _config_option(fn):
    return click.option(
        "--config",
        "config_path",
        type=_path,
        default=None,
        help="JSON file whose keys override these flags.",
    )(fn)


def _with_config(params: dict) -> dict:
    path = params.pop("config_path", None)
    if path is None:
        return params
    if not Path(path).exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: bad JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in params:
            raise ConfigError(f"{path}: unknown key {key!r} for this command")
        params[name] = value
    return params


def _reference_magnitudes(volume) -> np.ndarray:
    """Coil-combined magnitude stack [slice, ny, nx] from full k-space."""
    mags = [
        np.abs(mvue(volume.data[s], estimate_maps_lowfreq(volume.data[s])))
        for s in range(volume.n_slices)
    ]
    return np.stack(mags).astype(np.float32)


@click.group()
@click.version_option(version=__version__, prog_name="kcurate")
def cli():
    """Curate multi-coil MRI training data against a validation target."""


@cli.command()
@click.option("--root", required=True, type=_path, help="Directory holding the containers.")
@click.option("--meta", required=True, type=_path, help="Per-volume metadata sidecar (JSONL).")
@click.option("--out", required=True, type=_path, help="Manifest path to write.")
@_config_option
def ingest(**params):
    """Index k-space containers into a slice manifest."""
    p = _with_config(params)
    manifest = build_manifest(p["root"], read_sidecar(p["meta"]))
    manifest.save(p["out"])
    click.echo(f"wrote {len(manifest)} slice records to {p['out']}")


@cli.command()
@click.option("--count", required=True, type=int, help="Number of volumes.")
@click.option("--size", default=64, show_default=True, type=int, help="Grid size (square).")
@click.option("--coils", default=4, show_default=True, type=int)
@click.option("--slices", default=1, show_default=True, type=int, help="Slices per volume.")
@click.option("--noise", default=0.0, show_default=True, type=float, help="K-space noise sigma.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=_path, help="Corpus directory to create.")
@_config_option
def phantom(**params):
    """Write a synthetic multi-coil corpus plus its manifest."""
    p = _with_config(params)
    manifest_path = write_corpus(
        p["out"],
        p["count"],
        grid_size=(p["size"], p["size"]),
        coil_count=p["coils"],
        seed=p["seed"],
        slices_per_volume=p["slices"],
        noise_sigma=p["noise"],
    )
    click.echo(f"wrote {p['count']} volumes and manifest {manifest_path}")


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=_path)
@click.option("--method", default="mvue", show_default=True, type=click.Choice(RECON_METHODS))
@click.option("--accel", default=1.0, show_default=True, type=float, help="Acceleration factor.")
@click.option("--seed", default=0, show_default=True, type=int, help="Mask offset seed.")
@click.option("--out", required=True, type=_path, help="Output directory.")
@_config_option
def recon(**params):
    """Reconstruct every manifest volume, optionally undersampled.

    Per volume: ``<id>.npy`` holds float32 real/imaginary planes shaped
    [slice, 2, ny, nx], and ``<id>.mask.npy`` the boolean line mask used.
    """
    p = _with_config(params)
    manifest = DatasetManifest.load(p["manifest_path"])
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    for vid in manifest.volume_ids():
        vol = load_volume(manifest.path_for(vid))
        mask = make_mask(vol.data.shape[-1], p["accel"], seed=_mask_seed(p["seed"], vid))
        fraction = min(0.16, mask.center_fraction)
        planes = []
        for s in range(vol.n_slices):
            masked = apply_mask(vol.data[s], mask)
            maps = (
                None
                if p["method"] == "rss"
                else estimate_maps_lowfreq(masked, fraction=fraction)
            )
            image = reconstruct(masked, maps, p["method"])
            planes.append(np.stack([image.real, image.imag]).astype(np.float32))
        np.save(out / f"{vid}.npy", np.stack(planes))
        np.save(out / f"{vid}.mask.npy", mask.line_selector)
    click.echo(f"reconstructed {len(manifest.volume_ids())} volumes into {out}")


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=_path)
@click.option("--out", required=True, type=_path, help="Patch export directory.")
@_config_option
def patches(**params):
    """Export volume-max-normalized patches for an external embedder."""
    p = _with_config(params)
    manifest = DatasetManifest.load(p["manifest_path"])
    tiles, refs = [], []
    for vid in manifest.volume_ids():
        mags = _normalized(_reference_magnitudes(load_volume(manifest.path_for(vid))), vid)
        for rec in manifest.records_for(vid):
            t, r = extract_patches(mags[rec.slice_index], vid, rec.slice_index)
            tiles.append(t)
            refs.extend(r)
    stack = (
        np.concatenate(tiles)
        if tiles
        else np.empty((0, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    )
    write_patch_dir(p["out"], stack, refs)
    click.echo(f"wrote {len(refs)} patches to {p['out']}")


@cli.group(name="filter")
def filter_group():
    """Slice screening and curation filters."""


@filter_group.command(name="heuristic")
@click.option("--manifest", "manifest_path", required=True, type=_path)
@click.option("--energy-th", default=0.11, show_default=True, type=float)
@click.option("--edge-th", default=0.017, show_default=True, type=float)
@click.option("--out", required=True, type=_path, help="Curation result (JSONL).")
@_config_option
def filter_heuristic(**params):
    """Keep slices that clear both the energy and edge-density thresholds."""
    p = _with_config(params)
    manifest = DatasetManifest.load(p["manifest_path"])
    thresholds = HeuristicThresholds(energy=p["energy_th"], edge=p["edge_th"])

    def loader(vid: str) -> np.ndarray:
        return _reference_magnitudes(load_volume(manifest.path_for(vid)))

    entries, scores = heuristic_filter(manifest, loader, thresholds)
    write_curation(
        p["out"],
        entries,
        params={
            "filter": "heuristic",
            "energy_threshold": thresholds.energy,
            "edge_threshold": thresholds.edge,
        },
    )
    click.echo(f"kept {len(entries)}/{len(scores)} slices, wrote {p['out']}")


@filter_group.command(name="align")
@click.option("--pool", "pool_path", required=True, type=_path, help="Pool embeddings (.kemb).")
@click.option("--val", "val_path", required=True, type=_path, help="Target embeddings (.kemb).")
@click.option("--retention", default=1 / 3, show_default="1/3", type=float)
@click.option(
    "--mode", default="plain", show_default=True, type=click.Choice(("plain", "weighted"))
)
@click.option("--manifest", "manifest_path", required=True, type=_path)
@click.option("--out", required=True, type=_path, help="Curation result (JSONL).")
@_config_option
def filter_align(**params):
    """Curate pool slices by validation-patch retrieval.

    Both embedding files are expected to be cleaned already (empty patches
    rejected, pool deduplicated within volumes).
    """
    p = _with_config(params)
    pool = read_embeddings(p["pool_path"])
    val = read_embeddings(p["val_path"])
    run = weighted_alignment_filter if p["mode"] == "weighted" else alignment_filter
    result = run(pool, val, p["retention"])
    per_source = retention_report(result, DatasetManifest.load(p["manifest_path"]))
    save_selection(result, p["out"], extra_params={"mode": p["mode"], "per_source": per_source})
    click.echo(f"selected {len(result.entries)} slices at k={result.k_star}, wrote {p['out']}")


@cli.command()
@click.option("--a", "a_path", required=True, type=_path, help="First embedding file.")
@click.option("--b", "b_path", required=True, type=_path, help="Second embedding file.")
@_config_option
def fdd(**params):
    """Distribution distance between two embedding files."""
    p = _with_config(params)
    report = fdd_report(read_embeddings(p["a_path"]), read_embeddings(p["b_path"]))
    click.echo(f"{report['value']:.12g}")
    click.echo(json.dumps(report, sort_keys=True))


def _parse_metric_names(spec: str) -> tuple[str, ...]:
    aliases = {"psnr": "psnr_db"}
    names = []
    for token in spec.split(","):
        token = token.strip().lower()
        if not token:
            continue
        name = aliases.get(token, token)
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {token!r}, expected ssim, psnr, nmse")
        names.append(name)
    if not names:
        raise ConfigError("no metrics requested")
    return tuple(names)


def _load_magnitudes(path: Path) -> np.ndarray:
    """Magnitude stack [slice, ny, nx] from a reconstruction file.

    Accepts the recon CLI's [slice, 2, ny, nx] real/imaginary layout or a
    plain [slice, ny, nx] magnitude stack.
    """
    if not path.exists():
        raise MissingArtifactError(f"no reconstruction file at {path}")
    arr = np.load(path)
    if arr.ndim == 4 and arr.shape[1] == 2:
        return np.hypot(arr[:, 0].astype(np.float64), arr[:, 1].astype(np.float64))
    if arr.ndim == 3:
        return np.asarray(arr, dtype=np.float64)
    raise FormatError(f"{path}: expected [slice, 2, ny, nx] or [slice, ny, nx], got {arr.shape}")


@cli.command(name="eval")
@click.option("--recon-dir", "recon_dir", required=True, type=_path)
@click.option("--ref-dir", "ref_dir", required=True, type=_path)
@click.option("--manifest", "manifest_path", required=True, type=_path)
@click.option("--metrics", default="ssim,psnr,nmse", show_default=True)
@click.option("--bootstrap", default=10_000, show_default=True, type=int, help="Resample count.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=_path, help="Report path (JSON).")
@_config_option
def eval_command(**params):
    """Score reconstructions against references inside the anatomy mask."""
    p = _with_config(params)
    manifest = DatasetManifest.load(p["manifest_path"])
    names = _parse_metric_names(p["metrics"])
    rows = []
    for vid in manifest.volume_ids():
        recon_stack = _load_magnitudes(Path(p["recon_dir"]) / f"{vid}.npy")
        ref_stack = _load_magnitudes(Path(p["ref_dir"]) / f"{vid}.npy")
        vol = load_volume(manifest.path_for(vid))
        for rec in manifest.records_for(vid):
            mask = foreground_mask(estimate_maps_lowfreq(vol.data[rec.slice_index]))
            rows.append(
                evaluate_slice(
                    recon_stack[rec.slice_index],
                    ref_stack[rec.slice_index],
                    mask,
                    volume_id=vid,
                    slice_index=rec.slice_index,
                    distribution_key=rec.distribution_key(),
                )
            )
    report = build_metric_report(rows, seed=p["seed"], resamples=p["bootstrap"], metrics=names)
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    for name in names:
        lo, hi = report["ci"][name]
        click.echo(f"{name}: {report['grand_mean'][name]:.6g} (CI {lo:.6g}..{hi:.6g})")


@cli.command(name="report")
@click.option("--workdir", required=True, type=_path, help="Pipeline run directory.")
@click.option("--check", is_flag=True, help="Verify the provenance hash chain first.")
@_config_option
def report_command(**params):
    """Print a run's report; optionally verify its artifact hashes."""
    p = _with_config(params)
    workdir = Path(p["workdir"])
    if p["check"]:
        problems = verify_provenance(workdir)
        if problems:
            raise MissingArtifactError("provenance check failed: " + "; ".join(problems))
        click.echo(f"provenance ok: {workdir / 'provenance.jsonl'}", err=True)
    report_path = workdir / "report.json"
    if not report_path.exists():
        raise MissingArtifactError(f"no report at {report_path}; run the pipeline first")
    click.echo(report_path.read_text().rstrip("\n"))


@cli.command()
@click.option("--config", "config_path", required=True, type=_path, help="Run config (JSON).")
def run(config_path: Path):
    """Run the full staged pipeline described by a config file."""
    report_path = run_pipeline(load_config(config_path))
    click.echo(f"report: {report_path}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 2 if isinstance(e, click.UsageError) else e.exit_code
    except KcurateError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
