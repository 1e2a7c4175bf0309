"""Embedding backends.

Two kinds of model id are understood:

* ``toy/rp{dim}/s{seed}`` selects the built-in fixture: a seeded random
  projection with a tanh squash, bit-identical to the fixture embedder the
  curation engine uses for its own tests, so files from either side are
  interchangeable under the same id.
* anything else is treated as a pretrained perceptual model and loaded
  lazily, keeping heavyweight ML runtimes out of every other code path.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import ExportError

POOLED_SIDE = 32
WEIGHT_STD = 1.0 / POOLED_SIDE
BIAS_STD = 0.01

_FIXTURE_ID = re.compile(r"^toy/rp(\d+)/s(\d+)$")


class FixtureModel:
    """Deterministic random-projection embedder for offline use."""

    def __init__(self, dim: int, seed: int):
        if dim < 1:
            raise ExportError("embedding dim must be >= 1")
        self.dim = dim
        g = np.random.Generator(np.random.Philox(seed=np.random.SeedSequence([seed, 0x70])))
        n_feat = POOLED_SIDE * POOLED_SIDE
        self._w = g.normal(0.0, WEIGHT_STD, size=(dim, n_feat))
        self._b = g.normal(0.0, BIAS_STD, size=dim)

    def embed(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        n, h, w = patches.shape
        if h != w or h % POOLED_SIDE != 0:
            raise ExportError(
                f"patches must be square with side divisible by {POOLED_SIDE}, got {patches.shape}"
            )
        f = h // POOLED_SIDE
        pooled = patches.reshape(n, POOLED_SIDE, f, POOLED_SIDE, f).mean(axis=(2, 4))
        raw = np.tanh(pooled.reshape(n, -1) @ self._w.T + self._b)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        unit = np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)
        return unit.astype(np.float32)


class PerceptualModel:
    """Pretrained perceptual similarity model behind a batch-embed call."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from dreamsim import dreamsim
        except ImportError as e:
            raise ExportError(
                f"model {model_id!r} needs the optional ML runtime "
                f"(install the 'dreamsim' extra): {e}"
            ) from None
        self._torch = torch
        self.device = device
        try:
            self._model, _ = dreamsim(pretrained=True, device=device)
        except Exception as e:
            raise ExportError(f"failed to load model {model_id!r}: {e}") from None

    def embed(self, patches: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))
        # grayscale magnitudes -> 3-channel frames at the model's input size
        x = x.unsqueeze(1).repeat(1, 3, 1, 1)
        x = torch.nn.functional.interpolate(
            x, size=(224, 224), mode="bilinear", align_corners=False
        )
        with torch.no_grad():
            out = self._model.embed(x.to(self.device))
        return out.cpu().numpy().astype(np.float32)


def load_model(model_id: str, device: str = "cpu"):
    m = _FIXTURE_ID.match(model_id)
    if m:
        return FixtureModel(dim=int(m.group(1)), seed=int(m.group(2)))
    return PerceptualModel(model_id, device=device)
