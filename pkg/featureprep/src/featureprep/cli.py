"""featureprep <subcommand>: offline input production for the stt engine."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .annotations import convert_annotations, load_split_table
from .extract import export_features
from .manifest import ExtractionManifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featureprep",
        description="Produce STTF feature files and caption JSONL from "
                    "image folders and COCO-style annotations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-features", help="run a backbone over a manifest")
    p.add_argument("--manifest", type=Path, required=True,
                   help="extraction manifest (JSON)")

    p = sub.add_parser("convert-annotations",
                       help="COCO captions JSON -> captions.jsonl + splits")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--splits", type=Path,
                   help='JSON {"train": [ids], "test": [ids], ...}')
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "export-features":
            out = export_features(ExtractionManifest.load(args.manifest))
            print(out)
        else:
            splits = load_split_table(args.splits) if args.splits else None
            written = convert_annotations(args.annotations, args.out, splits)
            for name, path in written.items():
                print(f"{name}: {path}")
        return 0
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"featureprep: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
