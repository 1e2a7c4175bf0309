"""Data curation for accelerated-MRI training sets.

The package screens a pool of multi-coil k-space volumes with cheap image
heuristics, embeds surviving slices as patch vectors, selects the subset
whose patches best cover a validation target set, and evaluates masked
reconstruction quality with distribution-aware aggregation.
"""

from .alignment import (
    SelectedSlice,
    SelectionResult,
    alignment_filter,
    knn,
    load_selection,
    retention_report,
    save_selection,
    weighted_alignment_filter,
)
from .config import (
    FilterThresholds,
    RunConfig,
    config_hash,
    load_config,
    parse_config,
    require_valid,
    validate_config,
)
from .dataset import (
    DatasetManifest,
    KSpaceVolume,
    SliceRecord,
    build_manifest,
    load_volume,
    read_sidecar,
    save_volume,
    split_3d_to_views,
)
from .embeddings import (
    EmbeddingSet,
    KNNIndex,
    PatchRef,
    dedup_within_volume,
    extract_patches,
    read_embeddings,
    read_patch_dir,
    reject_empty,
    write_embeddings,
    write_patch_dir,
    zero_sibling_path,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    DegenerateMaskError,
    FormatError,
    KcurateError,
    MissingArtifactError,
    NumericError,
)
from .evaluation import (
    SliceMetrics,
    bootstrap_ci,
    build_metric_report,
    evaluate_slice,
    masked_nmse,
    masked_psnr,
    masked_ssim,
    normalize_to_reference,
    two_stage_mean,
)
from .frechet import GaussianStats, fdd, fdd_report, fit_gaussian, frechet_distance
from .heuristics import (
    HeuristicReport,
    HeuristicThresholds,
    edge_density,
    energy_ratio,
    heuristic_filter,
    screen_volume,
)
from .phantom import Ellipse, PhantomSpec, make_phantom, phantom_volume, simulate_kspace, write_corpus
from .pipeline import PipelineRun, run_pipeline
from .recon import (
    UndersamplingMask,
    apply_mask,
    estimate_maps_lowfreq,
    foreground_mask,
    make_mask,
    mvue,
    reconstruct,
    rss,
)
from .toy import toy_embed, toy_zero_embedding

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetManifest",
    "DegenerateInputError",
    "DegenerateMaskError",
    "Ellipse",
    "EmbeddingSet",
    "FilterThresholds",
    "FormatError",
    "GaussianStats",
    "HeuristicReport",
    "HeuristicThresholds",
    "KNNIndex",
    "KSpaceVolume",
    "KcurateError",
    "MissingArtifactError",
    "NumericError",
    "PatchRef",
    "PhantomSpec",
    "PipelineRun",
    "RunConfig",
    "SelectedSlice",
    "SelectionResult",
    "SliceMetrics",
    "SliceRecord",
    "UndersamplingMask",
    "alignment_filter",
    "apply_mask",
    "bootstrap_ci",
    "build_manifest",
    "build_metric_report",
    "config_hash",
    "dedup_within_volume",
    "edge_density",
    "energy_ratio",
    "estimate_maps_lowfreq",
    "evaluate_slice",
    "extract_patches",
    "fdd",
    "fdd_report",
    "fit_gaussian",
    "foreground_mask",
    "frechet_distance",
    "heuristic_filter",
    "knn",
    "load_config",
    "load_selection",
    "load_volume",
    "make_mask",
    "make_phantom",
    "masked_nmse",
    "masked_psnr",
    "masked_ssim",
    "mvue",
    "normalize_to_reference",
    "parse_config",
    "phantom_volume",
    "read_embeddings",
    "read_patch_dir",
    "read_sidecar",
    "reconstruct",
    "reject_empty",
    "require_valid",
    "retention_report",
    "rss",
    "run_pipeline",
    "save_selection",
    "save_volume",
    "screen_volume",
    "simulate_kspace",
    "split_3d_to_views",
    "toy_embed",
    "toy_zero_embedding",
    "two_stage_mean",
    "validate_config",
    "write_corpus",
    "write_embeddings",
    "write_patch_dir",
    "zero_sibling_path",
]
