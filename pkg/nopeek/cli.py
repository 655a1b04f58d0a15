"""Command-line entry point: argument parsing, logging setup and exit statuses."""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import commands
from .config import load_config
from .errors import ConfigError
from .features import FeatureKind

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError("<arguments>", message)


def _int_list(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _name_list(text: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker cap (results do not depend on it)")
    common.add_argument("--out", help="run directory (default: $NOPEEK_OUT or runs/default)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = _Parser(prog="nopeek", description="Inpainting-autoencoder anomaly detection pipeline.")
    stages = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    stages.add_parser("gen-data", parents=[common], help="generate the synthetic data suite")

    stage = stages.add_parser("train", parents=[common], help="train the inpainting autoencoder")
    stage.add_argument("--corpus", choices=commands.CORPORA, default="main")

    stage = stages.add_parser("features", parents=[common], help="extract feature files")
    stage.add_argument("--corpus", choices=commands.CORPORA, default="main")
    stage.add_argument("--feature-kind", type=_name_list, help="comma-separated feature kinds")

    stage = stages.add_parser("score", parents=[common], help="score holdout and probe images")
    stage.add_argument("--methods", type=_name_list, help="comma-separated scoring methods")

    stage = stages.add_parser("eval-sets", parents=[common], help="anomaly and control set trials")
    stage.add_argument("--methods", type=_name_list, help="comma-separated scoring methods")
    stage.add_argument("--set-sizes", type=_int_list, help="comma-separated set sizes")
    stage.add_argument("--trials", type=int, help="trials per set size")

    stage = stages.add_parser("eval-attr", parents=[common], help="proxy-attribute experiment")
    stage.add_argument("--feature-kind", type=_name_list, help="comma-separated feature kinds")

    stages.add_parser("report", parents=[common], help="recall tables, decile manifest, residual maps")
    return parser


def exit_code(err: BaseException) -> int:
    """Exit status for an exception escaping a command."""
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, FileNotFoundError):
        return EXIT_MISSING_ARTIFACT
    if isinstance(err, (ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


def error_line(err: BaseException) -> str:
    return f"error code={exit_code(err)} kind={type(err).__name__} message={json.dumps(str(err))}"


async def run(args: argparse.Namespace) -> str:
    """
    Execute one parsed command.

    @returns a one-line summary of what was written
    @raises ConfigError, MissingArtifactError, TrainingDivergedError and the
            errors of the stage itself
    """
    config = await load_config(args.config)
    config = config.with_overrides(
        seed=args.seed,
        threads=args.threads,
        out=args.out,
        set_sizes=getattr(args, "set_sizes", None),
        trials=getattr(args, "trials", None),
        methods=getattr(args, "methods", None),
        feature_kinds=getattr(args, "feature_kind", None),
    )
    out = config.out
    command = args.command
    if command == "gen-data":
        manifests = await commands.gen_data(config)
        total = sum(len(m) for m in manifests.values())
        return f"gen-data: {total} images in {out}/data"
    if command == "train":
        ckpt = await commands.train(config, args.corpus)
        return f"train: {args.corpus} model after {ckpt.metadata.epochs} epoch(s), final loss {ckpt.metadata.loss_history[-1]:.5f}"
    if command == "features":
        kinds = tuple(FeatureKind(k) for k in config.features.kinds)
        tables = await commands.features(config, args.corpus, kinds)
        return f"features: {', '.join(k.value for k in tables)} for {args.corpus} in {out}/features"
    if command == "score":
        tables = await commands.score(config)
        return f"score: {len(tables)} method(s), {len(tables[0].ids)} images in {out}/scores"
    if command == "eval-sets":
        anomaly, _ = await commands.eval_sets(config)
        return f"eval-sets: {len(anomaly)} method(s) x {len(anomaly[0].sizes)} size(s), recall table in {out}/results"
    if command == "eval-attr":
        rows = await commands.eval_attr(config)
        return f"eval-attr: {len(rows)} cell(s) in {out}/results"
    written = await commands.report(config)
    return f"report: {len(written)} file(s) in {out}/report"


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one pipeline command.

    Usage:
        python -m nopeek COMMAND [--config PATH] [--seed N] [--threads N] [--out DIR] ...

    where COMMAND is one of gen-data, train, features, score, eval-sets, eval-attr
    and report. A full pipeline:

        python -m nopeek gen-data --config configs/smoke.yaml
        python -m nopeek train --config configs/smoke.yaml
        python -m nopeek eval-sets --config configs/smoke.yaml
        python -m nopeek report --config configs/smoke.yaml

    On failure a single line

        error code=<status> kind=<exception> message=<JSON string>

    goes to stderr and the exit status is 2 for a bad configuration, 3 for a
    missing upstream artifact, 4 for a numeric failure and 1 otherwise.

    @returns the exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as err:
        print(error_line(err), file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        summary = asyncio.run(run(args))
    except Exception as err:
        logger.debug("%s failed", args.command, exc_info=True)
        print(error_line(err), file=sys.stderr)
        return exit_code(err)
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
