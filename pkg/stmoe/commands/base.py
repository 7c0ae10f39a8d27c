"""Helpers shared by the subcommand modules."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Optional, Sequence

from .. import numkern as nk
from ..checkpoint import load as load_checkpoint
from ..config import RunConfig, load_config
from ..data import Batch, eval_batches, load_corpus, split
from ..errors import ConfigError
from ..model import StMoeLM
from ..utils import format_table, get_out_root, write_records

logger = logging.getLogger(__name__)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file or shipped config name (e.g. exp026_deep)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """Config file (or ``base``), then ``--set``, then ``--seed``."""
    if base is not None and not args.config:
        pairs = base.to_text().splitlines()
        return load_config(None, pairs + list(args.overrides), args.seed)
    return load_config(args.config, args.overrides, args.seed)


def run_dir(args: argparse.Namespace, name: str) -> Path:
    path = get_out_root(args.out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_name(args: argparse.Namespace, config: RunConfig) -> str:
    stem = Path(args.config).stem if args.config else "default"
    return f"{stem}_s{config.seed}"


def load_model(args: argparse.Namespace) -> tuple[RunConfig, StMoeLM]:
    """Checkpoint config with ``--set`` / ``--seed`` overrides for non-shape fields."""
    stored, model = load_checkpoint(args.ckpt)
    config = resolve_config(args, base=stored) if (args.overrides or args.seed is not None or args.config) else stored
    if config.to_model_config().architecture() != model.cfg.architecture():
        raise ConfigError("overrides change the checkpoint architecture")
    if config.to_model_config() != model.cfg:
        model = _rebind(model, config)
    return config, model


def _rebind(model: StMoeLM, config: RunConfig) -> StMoeLM:
    with nk.precision(config.precision):
        fresh = StMoeLM(config.to_model_config())
    src = dict(model.named_parameters())
    for name, t in fresh.named_parameters():
        t.data = src[name].data
    return fresh


def validation_batches(
    config: RunConfig, corpus_path: Optional[str] = None, n_batches: Optional[int] = None
) -> list[Batch]:
    path = corpus_path or config.corpus
    if not path:
        raise ConfigError("no corpus given (set corpus=PATH or pass --corpus)")
    _, val = split(load_corpus(path), config.val_fraction)
    return eval_batches(val, config.batch_size, config.seq_len, n_batches or config.eval_batches)


def emit(rows: Sequence[dict], headers: Sequence[str], out_path: Optional[Path] = None, records: Optional[list[dict]] = None) -> None:
    """Print a table to stdout and write line-delimited records."""
    print(format_table(list(headers), [[r.get(h) for h in headers] for r in rows]))
    if out_path is not None:
        write_records(out_path, records if records is not None else list(rows))
        logger.info("Wrote %s", out_path)
