"""Command-line extraction: manifest in, embedding stores out."""

from __future__ import annotations

import argparse
import sys

from .encoders import DEFAULT_ENCODER, get_encoder
from .extract import extract, read_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embextract",
        description="Encode images and captions from a manifest into "
        "binary embedding stores.",
    )
    parser.add_argument("--manifest", required=True, help="CSV of id,kind,value")
    parser.add_argument("--images-out", required=True)
    parser.add_argument("--texts-out", required=True)
    parser.add_argument(
        "--encoder",
        default=DEFAULT_ENCODER,
        help=f"encoder name (default {DEFAULT_ENCODER}; 'hashed:<dim>' for "
        "the deterministic offline encoder)",
    )
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--skip-report", help="write skipped rows as JSON here")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = read_manifest(args.manifest)
        encoder = get_encoder(args.encoder)
        report = extract(
            manifest, encoder, args.images_out, args.texts_out, args.batch_size
        )
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.skip_report:
        report.write(args.skip_report)
    if report.skipped:
        print(f"skipped {len(report.skipped)} rows", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
