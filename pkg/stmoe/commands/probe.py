"""``probe``: run one mechanistic probe against a checkpoint."""
from __future__ import annotations

import argparse
from typing import Any

from .. import numkern as nk
from .. import probes
from ..checkpoint import load as load_checkpoint
from ..errors import ConfigError
from ..utils import get_out_root
from .base import add_config_flags, emit, load_model, validation_batches

PROBES = ("echo", "frozen", "identity", "cross-seed", "zeroing", "norms")


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("probe", help="mechanistic probes on a checkpoint")
    p.add_argument("name", choices=PROBES)
    add_config_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--ckpt-b", help="second checkpoint (cross-seed)")
    p.add_argument("--corpus", help="byte corpus (default: the checkpoint's corpus)")
    p.set_defaults(handler=run)


def _fmt_metrics(report: probes.ProbeReport) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = [{"scope": "all", "metric": k, "value": v} for k, v in report.metrics.items()]
    rows.append({"scope": "all", "metric": "sample_size", "value": report.sample_size})
    for layer in report.per_layer:
        scope = f"layer {layer['layer']}"
        rows.extend({"scope": scope, "metric": k, "value": v} for k, v in layer.items() if k != "layer")
    return rows


def run(args: argparse.Namespace) -> int:
    config, model = load_model(args)
    with nk.precision(config.precision):
        if args.name == "identity":
            report = probes.identity(model)
        elif args.name == "cross-seed":
            if not args.ckpt_b:
                raise ConfigError("cross-seed needs --ckpt-b")
            _, model_b = load_checkpoint(args.ckpt_b)
            report = probes.cross_seed_alignment(
                model, model_b, n=config.vocab_top_n, trials=config.baseline_trials, seed=config.stats_seed
            )
        else:
            batches = validation_batches(config, args.corpus, config.probe_batches)
            if args.name == "echo":
                report = probes.echo_chamber(model, batches)
            elif args.name == "frozen":
                report = probes.frozen_routing_eval(model, batches)
            elif args.name == "zeroing":
                report = probes.expert_zeroing(model, batches)
            else:
                report = probes.norms(model, batches)
    out = get_out_root(args.out) / f"probe_{args.name}.jsonl"
    emit(_fmt_metrics(report), ["scope", "metric", "value"], out, [{"config": config.model_dump()}] + report.records())
    return 0
