"""``params``: parameter breakdown of a config, no model instantiated."""
from __future__ import annotations

import argparse

from ..model import param_count
from .base import add_config_flags, emit, resolve_config


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("params", help="parameter counts per component")
    add_config_flags(p)
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    counts = param_count(config.to_model_config()).as_dict()
    emit([{"component": k, "params": v} for k, v in counts.items()], ["component", "params"])
    return 0
