"""Command-line surface: preprocess, train, evaluate, retrieve, export-index.

Every subcommand reads one YAML config (--config) with optional --set
key=value overrides. Exit codes: 0 success, 2 configuration error,
3 preprocessing incomplete, 4 external service failure, 5 determinism
violation, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import UnicirError
from .evaluation import format_report
from .pipeline import (
    run_evaluate,
    run_export_index,
    run_preprocess,
    run_retrieve,
    run_train,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry (dotted keys, YAML values); repeatable",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unicir",
        description=(
            "Composed image retrieval via raw-data query unification: "
            "preprocess caches, train the fusion head, evaluate recall protocols."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="fill caption/keyword/text caches and render visual queries")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=None, help="parallel workers over triplets")

    p = sub.add_parser("train", help="optimize the fusion head (and backbone groups)")
    _add_common(p)
    p.add_argument("--out", default=None, help="output directory for logs (default: config output_dir)")

    p = sub.add_parser("evaluate", help="run the configured protocol and write metric reports")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="evaluate one explicit checkpoint file")
    p.add_argument("--out", default=None, help="output directory for reports")

    p = sub.add_parser("retrieve", help="rank candidates for a single ad-hoc query")
    _add_common(p)
    p.add_argument("--image", required=True, help="reference image path")
    p.add_argument("--text", required=True, help="modification text")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", default=None, help="reuse an exported index prefix")
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-index", help="encode the candidate set and export the embedding matrix")
    _add_common(p)
    p.add_argument("--out", default=None, help="output path prefix (writes .f32 and .ids)")
    p.add_argument("--checkpoint", default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "preprocess":
            summary = run_preprocess(config, jobs=args.jobs)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "train":
            summary = run_train(config, out_dir=args.out)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "evaluate":
            reports = run_evaluate(config, checkpoint_path=args.checkpoint, out_dir=args.out)
            for seed in sorted(reports):
                print(format_report(reports[seed]))
        elif args.command == "retrieve":
            print(
                run_retrieve(
                    config,
                    reference_image=args.image,
                    modification_text=args.text,
                    top_k=args.top_k,
                    checkpoint_path=args.checkpoint,
                    index_prefix=args.index,
                    out_dir=args.out,
                )
            )
        elif args.command == "export-index":
            mat_path, ids_path = run_export_index(
                config, out_prefix=args.out, checkpoint_path=args.checkpoint
            )
            print(json.dumps({"matrix": str(mat_path), "ids": str(ids_path)}))
    except UnicirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
