"""Command-line entry point: ``bugloc <stage|run|compare> --manifest PATH``.

Exit status is 0 on success, 1 for manifest/artifact validation errors and
2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from .pipeline import STAGES, ExperimentManifest, PipelineError, compare, run

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, action="append", metavar="PATH")
    parser.add_argument("--seed", type=int, default=None, help="override the manifest's global seed")
    parser.add_argument("--artifact-dir", default=None, metavar="PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bugloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage.replace("_", "-"), help=f"run the {stage} stage"))
    p = sub.add_parser("run", help="run every stage in order, or one with --stage")
    _common(p)
    # accept train-head as well as train_head
    p.add_argument("--stage", type=lambda v: v.replace("-", "_"), choices=STAGES)
    p = sub.add_parser("compare", help="pairwise Mann-Whitney tests across experiments")
    _common(p)
    p.add_argument("--metric", choices=("mrr", "map"), default="mrr")
    p.add_argument("--unit", choices=("project", "bug"), default="project")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        manifests = [ExperimentManifest.load(p, seed=args.seed, artifact_dir=args.artifact_dir) for p in args.manifest]
        if args.command == "compare":
            table = compare(manifests, args.metric, args.unit)
            print(json.dumps([asdict(r) for r in table], indent=2))
            return EXIT_OK
        if len(manifests) != 1:
            raise PipelineError(f"{args.command} takes exactly one manifest")
        if args.command == "run":
            stage = args.stage
        else:
            stage = args.command.replace("-", "_")
        for name, status in run(manifests[0], stage).items():
            print(f"{name}: {status}")
        return EXIT_OK
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
