"""``stats``: all-pairs paired-bootstrap / TOST report over per-batch loss files."""
from __future__ import annotations

import argparse
import re
from collections import defaultdict

import numpy as np

from ..errors import ConfigError
from ..stats import DEFAULT_RESAMPLES, DEFAULT_SEED, all_pairs_report, read_loss_files, seed_variance
from ..utils import get_out_root, write_records
from .base import emit

_SEED_SUFFIX = re.compile(r"_s\d+$")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def add_parser(subparsers: argparse._SubParsersAction) -> None:
    p = subparsers.add_parser("stats", help="equivalence report over per-batch loss files")
    p.add_argument("files", nargs="+", help="loss files, one per variant (label = file name)")
    p.add_argument("--margins", default="0.01,0.02,0.03", help="TOST margins (default 0.01,0.02,0.03)")
    p.add_argument("--blocks", default="1,5,10", help="block sizes for the robustness section")
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="bootstrap seed")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument(
        "--seed-variance",
        action="store_true",
        help="also group files by label minus a _s<seed> suffix and report seed variance",
    )
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    if len(args.files) < 2:
        raise ConfigError("stats needs at least 2 loss files")
    variants = read_loss_files(args.files)
    margins = _floats(args.margins)
    blocks = [int(b) for b in _floats(args.blocks)]
    report = all_pairs_report(variants, margins, args.resamples, args.seed, args.level, blocks)

    rows = []
    for pr in report.pairs:
        row = {"pair": f"{pr.a} - {pr.b}", "mean": pr.mean, "ci95": f"[{pr.ci95[0]:.4f}, {pr.ci95[1]:.4f}]",
               "ci90": f"[{pr.ci90[0]:.4f}, {pr.ci90[1]:.4f}]", "zero_in_ci": pr.zero_in_ci}
        for m in margins:
            row[f"eq@{m:g}"] = pr.verdicts[m]
        rows.append(row)
    headers = ["pair", "mean", "ci95", "ci90", "zero_in_ci"] + [f"eq@{m:g}" for m in margins]
    emit(rows, headers)
    print()
    emit(
        [{"margin": m, "equivalent": c, "pairs": report.n_pairs} for m, c in report.counts().items()],
        ["margin", "equivalent", "pairs"],
    )
    if blocks:
        print()
        block_rows = []
        for pr in report.pairs:
            base = pr.block_widths.get(1)
            row = {"pair": f"{pr.a} - {pr.b}"}
            for b, w in pr.block_widths.items():
                row[f"width@{b}"] = w / base if base else None
            block_rows.append(row)
        emit(block_rows, ["pair"] + [f"width@{b}" for b in blocks])

    settings = {
        "files": list(args.files),
        "margins": margins,
        "block_sizes": blocks,
        "resamples": args.resamples,
        "seed": args.seed,
        "level": args.level,
    }
    records = [{"config": settings}] + report.records()
    if args.seed_variance:
        groups: dict[str, list[float]] = defaultdict(list)
        for label, values in variants.items():
            groups[_SEED_SUFFIX.sub("", label)].append(float(np.mean(values)))
        sv = seed_variance(groups)
        print()
        emit(
            [{"variant": k, **v} for k, v in sv.per_variant.items()],
            ["variant", "mean", "std", "n"],
        )
        print(f"spread={sv.spread:.6g} avg_std={sv.avg_std:.6g} ratio={sv.ratio:.6g} ratio_vs_max_std={sv.max_std_ratio:.6g}")
        records.append({"kind": "seed_variance", "spread": sv.spread, "avg_std": sv.avg_std,
                        "ratio": sv.ratio, "flagged": sv.ratio_flagged, "max_std_ratio": sv.max_std_ratio})
    write_records(get_out_root(args.out) / "stats_report.jsonl", records)
    return 0
