"""Run configuration: one JSON file drives a full curation run.

The canonical serialization (sorted keys, fixed separators) is hashed with
SHA-256 and stamped into every artifact's provenance, so two runs can be
compared by hash alone. Construction never raises; ``validate_config``
returns the list of violations and loaders refuse configs that have any.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ConfigError
from .heuristics import HeuristicThresholds

MODES = ("alignment", "weighted")
EMBEDDERS = ("toy", "external")


@dataclass(frozen=True)
class FilterThresholds:
    """Cutoffs for the screening and cleaning steps."""

    energy: float = 0.11
    edge: float = 0.017
    empty: float = 0.6
    dedup: float = 0.9

    def heuristic(self) -> HeuristicThresholds:
        return HeuristicThresholds(energy=self.energy, edge=self.edge)


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on, in one hashable record."""

    pool_manifest: str
    val_manifest: str
    workdir: str
    seed: int = 0
    acceleration: float = 4.0
    mode: str = "alignment"
    retention: float = 0.5
    use_heuristic: bool = True
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    embedder: str = "toy"
    embed_dim: int = 64
    external_pool_embeddings: str | None = None
    external_val_embeddings: str | None = None
    workers: int = 1


def validate_config(config: RunConfig) -> list[str]:
    """Every invariant violation in the config, empty when it is usable."""
    problems = []
    for name in ("energy", "edge", "empty", "dedup"):
        v = getattr(config.thresholds, name)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not 0 <= v <= 1:
            problems.append(f"thresholds.{name} must lie in [0, 1], got {v!r}")
    if config.mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {config.mode!r}")
    if config.embedder not in EMBEDDERS:
        problems.append(f"embedder must be one of {EMBEDDERS}, got {config.embedder!r}")
    if not 0 < config.retention <= 1:
        problems.append(f"retention must lie in (0, 1], got {config.retention!r}")
    if config.acceleration < 1:
        problems.append(f"acceleration must be >= 1, got {config.acceleration!r}")
    if config.embed_dim < 1:
        problems.append(f"embed_dim must be >= 1, got {config.embed_dim!r}")
    if config.workers < 1:
        problems.append(f"workers must be >= 1, got {config.workers!r}")
    if config.embedder == "external" and not (
        config.external_pool_embeddings and config.external_val_embeddings
    ):
        problems.append("external embedder needs both embedding file paths")
    for name in ("pool_manifest", "val_manifest", "workdir"):
        if not getattr(config, name):
            problems.append(f"{name} must be a non-empty path")
    return problems


def require_valid(config: RunConfig) -> RunConfig:
    problems = validate_config(config)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return config


def canonical_json(config: RunConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def parse_config(raw: dict, origin: str = "config") -> RunConfig:
    """Build a validated RunConfig from a parsed JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{origin}: config must be a JSON object")
    raw = dict(raw)
    # historical alias for the unweighted mode
    if raw.get("mode") == "plain":
        raw["mode"] = "alignment"
    thresholds = raw.pop("thresholds", None)
    known = set(RunConfig.__dataclass_fields__) - {"thresholds"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{origin}: unknown config keys {sorted(unknown)}")
    missing = {"pool_manifest", "val_manifest", "workdir"} - set(raw)
    if missing:
        raise ConfigError(f"{origin}: missing required keys {sorted(missing)}")
    if thresholds is not None:
        if not isinstance(thresholds, dict):
            raise ConfigError(f"{origin}: thresholds must be a JSON object")
        bad = set(thresholds) - set(FilterThresholds.__dataclass_fields__)
        if bad:
            raise ConfigError(f"{origin}: unknown threshold keys {sorted(bad)}")
        raw["thresholds"] = FilterThresholds(**thresholds)
    try:
        config = RunConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"{origin}: {e}") from None
    return require_valid(config)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: bad JSON ({e})") from None
    return parse_config(raw, origin=str(path))
