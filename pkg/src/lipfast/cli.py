"""cli.py :: Argparse based CLI for lipfast.

Provides console_script via argparse.
"""

from __future__ import annotations

import argparse
import sys
import typing as t

from lipfast import __version__, logger
from lipfast.lipfast import SCHEDULES, main
from lipfast.oracles import GRADCHECK_SUITES


def _config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-c", "--config", help="specify alternate model config file"
    )
    parser.add_argument(
        "--seed", type=int, default=0, help="random seed (default 0)"
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipfast",
        description="Lipschitz-stabilised transformer audio classifier",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        help="increase verbosity (may repeat up to -vvv)",
        action="count",
        default=0,
    )
    parser.add_argument(
        "-V", "--version", action="version", version=__version__
    )
    commands = parser.add_subparsers(dest="command", required=True)

    params = commands.add_parser(
        "params", help="print the per-layer parameter table"
    )
    params.add_argument(
        "-c", "--config", help="specify alternate model config file"
    )

    infer = commands.add_parser("infer", help="score WAV files")
    _config_options(infer)
    infer.add_argument("--checkpoint", help="FSTC checkpoint to load")
    infer.add_argument(
        "--wav", nargs="+", required=True, help="WAV files to score"
    )

    train = commands.add_parser("train", help="train a model")
    _config_options(train)
    train.add_argument(
        "--data", help="directory with one sub-directory of WAVs per class"
    )
    train.add_argument("--epochs", type=int, default=30)
    train.add_argument(
        "--steps", type=int, help="stop after this many steps instead"
    )
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--schedule", choices=SCHEDULES, default="constant")
    train.add_argument(
        "--samples",
        type=int,
        default=256,
        help="synthetic examples when --data is not given",
    )
    train.add_argument("--output", help="CSV file for the step records")
    train.add_argument("--checkpoint", help="save the trained model here")

    gradcheck = commands.add_parser(
        "gradcheck", help="compare analytic and finite-difference gradients"
    )
    gradcheck.add_argument(
        "--module",
        action="append",
        choices=sorted(GRADCHECK_SUITES),
        help="suite to run (may repeat; default all)",
    )
    gradcheck.add_argument("--seeds", type=int, default=20)

    stability = commands.add_parser(
        "stability", help="train both block variants per learning rate"
    )
    _config_options(stability)
    stability.add_argument(
        "--lrs", type=float, nargs="+", default=[1e-3, 1e-2, 1e-1]
    )
    stability.add_argument("--steps", type=int, default=500)
    stability.add_argument("--batch-size", type=int, default=16)
    stability.add_argument("--output", help="CSV file for the step records")

    bench = commands.add_parser("bench", help="time single-sample inference")
    _config_options(bench)
    bench.add_argument("--checkpoint", help="FSTC checkpoint to load")
    bench.add_argument("--iterations", type=int, default=100)
    bench.add_argument("--warmup", type=int, default=10)
    return parser


def cli(arguments: t.Sequence[str] | None = None) -> None:
    """Parse command line options, provide entry point for console scripts."""
    if arguments is None:
        arguments = sys.argv[1:]
    args = _parser().parse_args(arguments)

    # args.verbose defaults to 0
    # 40 - 10 * 0 = 40 == logging.ERROR
    verbosity = max(40 - 10 * args.verbose, 10)
    logger.setLevel(verbosity)

    options = vars(args)
    command = options.pop("command")
    del options["verbose"]
    if command == "gradcheck":
        options["module"] = options["module"] or ()
    sys.exit(main(command, verbosity=verbosity, **options))


if __name__ == "__main__":
    cli()
