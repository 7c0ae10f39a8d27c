"""``halt-sweep``: zero-shot relative-norm halting across a grid of thresholds."""
from __future__ import annotations

import argparse

from .. import numkern as nk
from ..probes import halting_sweep
from ..utils import get_out_root
from .base import add_config_flags, emit, load_model, validation_batches


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("halt-sweep", help="avg hops / FLOP savings / dPPL per halting threshold")
    add_config_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--corpus", help="byte corpus (default: the checkpoint's corpus)")
    p.add_argument("--eps", help="comma-separated thresholds (default: eps_grid from the config)")
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    if args.eps:
        args.overrides = list(args.overrides) + [f"eps_grid={args.eps}"]
    config, model = load_model(args)
    with nk.precision(config.precision):
        batches = validation_batches(config, args.corpus, config.probe_batches)
        report = halting_sweep(model, batches, config.eps_grid)
    rows = [dict(r, flop_savings_pct=100.0 * r["flop_savings"]) for r in report.rows]
    out = get_out_root(args.out) / "halt_sweep.jsonl"
    emit(
        rows,
        ["eps", "avg_hops", "hops", "flop_savings_pct", "ppl", "delta_ppl"],
        out,
        [{"config": config.model_dump()}] + report.records(),
    )
    return 0
