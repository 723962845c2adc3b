"""Command line interface for the hidden-state exporter."""
from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportJob, export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hsexport",
        description="export final-layer LM hidden states for news articles")
    parser.add_argument("--model", required=True,
                        help="model name or local model directory")
    parser.add_argument("--articles", required=True,
                        help="article JSONL (id, date, text or tokens, tickers)")
    parser.add_argument("--tickers", required=True,
                        help="comma-separated ticker universe, index-aligned")
    parser.add_argument("--context", choices=("io", "ig"), default="io",
                        help="input-only or input-plus-generated states")
    parser.add_argument("--max-gen", type=int, default=8,
                        help="generation cap for --context ig")
    parser.add_argument("--out", default="hidden_states",
                        help="output directory for RPHS files and index")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        job = ExportJob(model=args.model, articles=args.articles,
                        tickers=args.tickers.split(","), context=args.context,
                        max_gen=args.max_gen, out=args.out)
        written = export(job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(written)} RPHS files to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
