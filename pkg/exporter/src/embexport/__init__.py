"""Embedding exporter: patch directory in, KEMB files out."""

from .kemb import PatchRef, write_kemb, zero_sibling_path
from .patches import read_patch_dir

__all__ = ["PatchRef", "write_kemb", "zero_sibling_path", "read_patch_dir"]
