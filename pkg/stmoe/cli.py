"""Command-line entry point: ``stmoe <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import NoReturn, Optional, Sequence

from . import __version__
from .commands import evaluate, halt_sweep, params, probe, stats, train
from .errors import StMoeError, StorageError
from .utils import configure_logging

logger = logging.getLogger(__name__)

EXIT_ERROR = 2

# One module per subcommand, registered in this order.
COMMANDS = (train, evaluate, probe, halt_sweep, stats, params)


class UsageError(StMoeError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same single-line report as domain errors."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmoe", description="Desk-scale geometric multi-hop MoE experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--out", help="output root (default: $STMOE_OUT or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress bar")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for module in COMMANDS:
        module.add_parser(sub)
    return parser


def report_error(err: StMoeError) -> None:
    msg = " ".join(str(err).split())
    sys.stderr.write(f"error: {err.code}: {msg}\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose)
        return int(args.handler(args))
    except StMoeError as e:
        report_error(e)
        return EXIT_ERROR
    except OSError as e:
        report_error(StorageError(str(e)))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
