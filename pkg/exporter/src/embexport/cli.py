"""``export_embeddings``: embed a patch export and write KEMB files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ExportError
from .kemb import PatchRef, write_kemb, zero_sibling_path
from .models import load_model
from .patches import read_patch_dir

ZERO_REF = PatchRef(volume_id="__zero__", slice_index=0, patch_row=0, patch_col=0)


def export(patch_dir, out_path, model_id: str, batch_size: int, device: str = "cpu") -> Path:
    """Embed every patch, in ref order, plus the all-zero reference patch."""
    if batch_size < 1:
        raise ExportError(f"batch size must be >= 1, got {batch_size}")
    patches, refs = read_patch_dir(patch_dir)
    model = load_model(model_id, device=device)
    chunks = [
        model.embed(patches[i : i + batch_size])
        for i in range(0, patches.shape[0], batch_size)
    ]
    if chunks:
        vectors = np.concatenate(chunks)
        dim = vectors.shape[1]
    else:
        # probe the dimension so an empty export still writes valid headers
        side = patches.shape[1] if patches.size else 128
        dim = model.embed(np.zeros((1, side, side), dtype=np.float32)).shape[1]
        vectors = np.empty((0, dim), dtype=np.float32)
    out_path = Path(out_path)
    write_kemb(out_path, vectors, refs, model_id)
    size = patches.shape[1] if patches.size else 128
    zero_vec = model.embed(np.zeros((1, size, size), dtype=np.float32))
    write_kemb(zero_sibling_path(out_path), zero_vec, [ZERO_REF], model_id)
    return out_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export_embeddings",
        description="Embed an exported patch directory into a KEMB file "
        "(plus the zero-patch reference sibling).",
    )
    parser.add_argument("--patches", required=True, help="Patch export directory.")
    parser.add_argument("--out", required=True, help="Output KEMB path.")
    parser.add_argument("--model", required=True, help="Model id, recorded verbatim.")
    parser.add_argument("--batch", type=int, default=256, help="Inference batch size.")
    parser.add_argument("--device", default="cpu", help="Device hint for the model.")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = export(args.patches, args.out, args.model, args.batch, device=args.device)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {out} and {zero_sibling_path(out)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
