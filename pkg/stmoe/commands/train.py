"""``train``: run the training loop from a config and write checkpoint + metrics."""
from __future__ import annotations

import argparse
import logging

from .. import numkern as nk
from ..data import load_corpus, split
from ..errors import ConfigError
from ..model import StMoeLM
from ..stats import write_loss_file
from ..train import train_loop
from .base import add_config_flags, emit, resolve_config, run_dir, run_name

logger = logging.getLogger(__name__)


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("train", help="train a model from a config")
    add_config_flags(p)
    p.add_argument("--corpus", help="byte corpus (overrides the config's corpus)")
    p.add_argument("--name", help="run directory name (default <config>_s<seed>)")
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.corpus:
        config = config.model_copy(update={"corpus": args.corpus})
    if not config.corpus:
        raise ConfigError("no corpus given (set corpus=PATH or pass --corpus)")
    config.log_resolved()
    out = run_dir(args, args.name or run_name(args, config))
    (out / "config.cfg").write_text(config.to_text(), encoding="utf-8")

    with nk.precision(config.precision):
        train_c, val_c = split(load_corpus(config.corpus), config.val_fraction)
        model = StMoeLM(config.to_model_config())
        result = train_loop(model, train_c, val_c, config, out, quiet=args.quiet)

    rows = [{"metric": "steps", "value": config.steps}]
    if result.records:
        last = result.records[-1]
        rows += [
            {"metric": "train_lm_loss", "value": last["lm_loss"]},
            {"metric": "avg_hops", "value": last["avg_hops"]},
        ]
    if result.final_eval is not None:
        ev = result.final_eval
        write_loss_file(out / f"{out.name}.losses", ev.per_batch, header=config.to_text())
        rows += [{"metric": "val_loss", "value": ev.mean_loss}, {"metric": "val_ppl", "value": ev.ppl}]
    rows.append({"metric": "checkpoint", "value": str(result.checkpoints[-1]) if result.checkpoints else None})
    emit(rows, ["metric", "value"])
    return 0
