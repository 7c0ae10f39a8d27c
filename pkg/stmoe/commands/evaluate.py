"""``eval``: perplexity of a checkpoint plus a per-batch loss file for ``stats``."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from .. import numkern as nk
from ..stats import write_loss_file
from ..train import eval_ppl
from ..utils import get_out_root
from .base import add_config_flags, emit, load_model, validation_batches

logger = logging.getLogger(__name__)


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("eval", help="evaluate a checkpoint on the fixed validation windows")
    add_config_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--corpus", help="byte corpus (default: the checkpoint's corpus)")
    p.add_argument("--label", help="variant label for the loss file (default: checkpoint directory name)")
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config, model = load_model(args)
    config.log_resolved()
    label = args.label or Path(args.ckpt).resolve().parent.name
    with nk.precision(config.precision):
        batches = validation_batches(config, args.corpus)
        res = eval_ppl(model, batches)
    loss_path = write_loss_file(get_out_root(args.out) / f"{label}.losses", res.per_batch, header=config.to_text())
    logger.info("Wrote %s", loss_path)
    emit(
        [
            {"label": label, "batches": len(batches), "loss": res.mean_loss, "ppl": res.ppl, "avg_hops": res.avg_hops}
        ],
        ["label", "batches", "loss", "ppl", "avg_hops"],
    )
    return 0
