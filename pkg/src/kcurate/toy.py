"""Self-contained toy embedding model for tests and offline runs.

A fixed random projection with a tanh nonlinearity: patches are 4x4
mean-pooled to 32x32, flattened, projected to the target dimension, squashed,
and L2-normalized. Deterministic given (dim, seed), cheap, and similar
patches land near each other, which is all the pipeline machinery needs.
Real runs replace this with an external model through the patch-export /
embedding-file interface.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .embeddings import EmbeddingSet, PatchRef
from .rng import philox

POOLED_SIDE = 32
WEIGHT_STD = 1.0 / POOLED_SIDE
# Small against the projected signal of any real patch, so only genuinely
# near-empty content lands near the zero-patch embedding tanh(b).
BIAS_STD = 0.01


def toy_model_id(dim: int, seed: int) -> str:
    return f"toy/rp{dim}/s{seed}"


def _projection(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_feat = POOLED_SIDE * POOLED_SIDE
    g = philox(seed, 0x70)
    w = g.normal(0.0, WEIGHT_STD, size=(dim, n_feat))
    b = g.normal(0.0, BIAS_STD, size=dim)
    return w, b


def _pool(patches: np.ndarray) -> np.ndarray:
    n, h, w = patches.shape
    if h != w or h % POOLED_SIDE != 0:
        raise ShapeMismatchError(
            f"patches must be square with side divisible by {POOLED_SIDE}, got {patches.shape}"
        )
    f = h // POOLED_SIDE
    pooled = patches.reshape(n, POOLED_SIDE, f, POOLED_SIDE, f).mean(axis=(2, 4))
    return pooled.reshape(n, -1)


def toy_embed(
    patches: np.ndarray, refs: list[PatchRef], dim: int = 64, seed: int = 0
) -> EmbeddingSet:
    """Embed a patch stack [n, size, size] into [n, dim] unit vectors."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
        raise ShapeMismatchError(f"expected [n, size, size], got {patches.shape}")
    if len(refs) != patches.shape[0]:
        raise ShapeMismatchError(f"{patches.shape[0]} patches but {len(refs)} refs")
    if dim < 1:
        raise ConfigError("embedding dim must be >= 1")
    w, b = _projection(dim, seed)
    raw = np.tanh(_pool(patches) @ w.T + b)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    vectors = np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)
    return EmbeddingSet(
        vectors=vectors.astype(np.float32), refs=list(refs), model_id=toy_model_id(dim, seed)
    )


def toy_zero_embedding(dim: int = 64, seed: int = 0, patch_size: int = 128) -> EmbeddingSet:
    """One-row set: the model's embedding of an all-zero patch."""
    zero = np.zeros((1, patch_size, patch_size))
    ref = PatchRef(volume_id="__zero__", slice_index=0, patch_row=0, patch_col=0)
    return toy_embed(zero, [ref], dim=dim, seed=seed)
