"""Command line entry point: ``backbone-export export ...``."""

from __future__ import annotations

import argparse
import glob
import sys
from pathlib import Path

from .runner import DEFAULT_FRAME_PERIOD, ExportError, ExportJob, export, load_model

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backbone-export",
        description="run a frame-wise CNN backbone over WAVs and write "
                    "TSEDEMB1 embedding files")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export embeddings for a set of wavs")
    p.add_argument("--model", required=True,
                   help="TorchScript model file, or bare id under $BACKBONE_EXPORT_MODELS")
    p.add_argument("--wavs", required=True, nargs="+", metavar="GLOB",
                   help="one or more glob patterns selecting input wav files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--models-dir", dest="models_dir",
                   help="directory searched for bare model ids")
    p.add_argument("--dim", type=int,
                   help="expected embedding dim; abort if the model differs")
    p.add_argument("--frame-period", dest="frame_period", type=float,
                   default=DEFAULT_FRAME_PERIOD,
                   help="expected frame period in seconds (default 0.040)")
    return parser


def run_export(args) -> int:
    wavs = []
    for pattern in args.wavs:
        wavs.extend(glob.glob(pattern, recursive=True))
    wavs = sorted(dict.fromkeys(wavs))
    model = load_model(args.model, search_dir=args.models_dir)
    job = ExportJob(wavs=tuple(Path(w) for w in wavs), out_dir=Path(args.out),
                    model_id=args.model, frame_period=args.frame_period,
                    dim=args.dim)
    manifest = export(job, model=model)
    print(f"wrote {len(manifest.files)} embedding files to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "export":
            return run_export(args)
        raise ExportError(f"unknown command {args.command!r}")
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
