"""Paired bootstrap, TOST equivalence, block bootstrap and seed-variance summaries.

Resampling uses numpy's PCG64 generator (``np.random.default_rng(seed)``);
resample indices are drawn as one ``(resamples, n)`` integer matrix so a
fixed (data, resamples, seed) gives bitwise-identical intervals.
Percentiles interpolate linearly between order statistics.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import AlignmentError, ConfigError, CorpusError, SampleSizeError

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 10_000
DEFAULT_SEED = 42


@dataclass(frozen=True)
class Interval:
    mean: float
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class TostResult:
    mean: float
    lo: float
    hi: float
    margin: float
    equivalent: bool
    p_value: float


def _diffs(diffs: Sequence[float]) -> np.ndarray:
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    if d.size < 2:
        raise SampleSizeError(f"need at least 2 paired differences, got {d.size}")
    return d


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must lie in (0, 1), got {level}")


def _constant(d: np.ndarray) -> Optional[float]:
    return float(d[0]) if np.all(d == d[0]) else None


def bootstrap_means(diffs: Sequence[float], resamples: int = DEFAULT_RESAMPLES, seed: int = DEFAULT_SEED) -> np.ndarray:
    d = _diffs(diffs)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    return d[idx].mean(axis=1)


def block_bootstrap_means(
    diffs: Sequence[float], block: int, resamples: int = DEFAULT_RESAMPLES, seed: int = DEFAULT_SEED
) -> np.ndarray:
    """Circular moving-block resample means; ``block=1`` draws the same stream as the paired bootstrap."""
    d = _diffs(diffs)
    n = d.size
    if not 1 <= block <= n:
        raise ConfigError(f"block must lie in [1, {n}], got {block}")
    n_blocks = math.ceil(n / block)
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, n, size=(resamples, n_blocks))
    idx = (starts[:, :, None] + np.arange(block)[None, None, :]) % n
    idx = idx.reshape(resamples, n_blocks * block)[:, :n]
    return d[idx].mean(axis=1)


def _interval(d: np.ndarray, means: np.ndarray, level: float) -> Interval:
    c = _constant(d)
    if c is not None:
        return Interval(c, c, c)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return Interval(float(np.mean(d)), float(lo), float(hi))


def paired_bootstrap_ci(
    diffs: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    level: float = 0.95,
    seed: int = DEFAULT_SEED,
) -> Interval:
    """Percentile CI of the mean paired difference."""
    _check_level(level)
    d = _diffs(diffs)
    return _interval(d, bootstrap_means(d, resamples, seed), level)


def block_bootstrap_ci(
    diffs: Sequence[float],
    block: int,
    resamples: int = DEFAULT_RESAMPLES,
    level: float = 0.95,
    seed: int = DEFAULT_SEED,
) -> Interval:
    _check_level(level)
    d = _diffs(diffs)
    return _interval(d, block_bootstrap_means(d, block, resamples, seed), level)


def _tost_from_means(d: np.ndarray, means: np.ndarray, margin: float) -> TostResult:
    ci = _interval(d, means, 0.90)
    equivalent = -margin <= ci.lo and ci.hi <= margin
    p_value = float(max(np.mean(means <= -margin), np.mean(means >= margin)))
    return TostResult(ci.mean, ci.lo, ci.hi, margin, equivalent, p_value)


def tost(
    diffs: Sequence[float],
    margin: float,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
) -> TostResult:
    """Equivalent iff the 90% bootstrap CI lies inside the closed interval [-margin, margin]."""
    if margin <= 0:
        raise ConfigError(f"equivalence margin must be > 0, got {margin}")
    d = _diffs(diffs)
    return _tost_from_means(d, bootstrap_means(d, resamples, seed), margin)


def zero_in_ci(diffs: Sequence[float], resamples: int = DEFAULT_RESAMPLES, level: float = 0.95, seed: int = DEFAULT_SEED) -> bool:
    return paired_bootstrap_ci(diffs, resamples, level, seed).contains(0.0)


# -----------------------------------------------------------------------------
# All-pairs report
# -----------------------------------------------------------------------------


@dataclass
class PairResult:
    a: str
    b: str
    mean: float
    ci95: tuple[float, float]
    ci90: tuple[float, float]
    zero_in_ci: bool
    verdicts: dict[float, bool]
    p_values: dict[float, float]
    block_widths: dict[int, float] = field(default_factory=dict)

    def record(self) -> dict:
        rec = asdict(self)
        rec["verdicts"] = {str(k): v for k, v in self.verdicts.items()}
        rec["p_values"] = {str(k): v for k, v in self.p_values.items()}
        rec["block_widths"] = {str(k): v for k, v in self.block_widths.items()}
        return rec


@dataclass
class EquivReport:
    labels: list[str]
    margins: list[float]
    pairs: list[PairResult]
    n_batches: int

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def counts(self) -> dict[float, int]:
        return {m: sum(p.verdicts[m] for p in self.pairs) for m in self.margins}

    def records(self) -> list[dict]:
        head = {
            "kind": "summary",
            "labels": self.labels,
            "n_batches": self.n_batches,
            "n_pairs": self.n_pairs,
            "equivalent": {str(m): c for m, c in self.counts().items()},
        }
        return [head] + [{"kind": "pair", **p.record()} for p in self.pairs]


def all_pairs_report(
    variants: Mapping[str, Sequence[float]],
    margins: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = DEFAULT_SEED,
    level: float = 0.95,
    block_sizes: Sequence[int] = (),
) -> EquivReport:
    """Bootstrap CI and TOST verdicts for every unordered pair of variants.

    Every pair reuses the same seed, so a pair's result does not depend on
    which other variants are present.
    """
    if len(variants) < 2:
        raise ConfigError(f"need at least 2 variants, got {len(variants)}")
    if not margins or min(margins) <= 0:
        raise ConfigError("margins must be positive")
    labels = list(variants)
    arrays = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in variants.items()}
    sizes = {a.size for a in arrays.values()}
    if len(sizes) != 1:
        detail = ", ".join(f"{k}={a.size}" for k, a in arrays.items())
        raise AlignmentError(f"per-batch loss vectors differ in length ({detail})")
    pairs = []
    for a, b in itertools.combinations(labels, 2):
        d = _diffs(arrays[a] - arrays[b])
        means = bootstrap_means(d, resamples, seed)
        ci95 = _interval(d, means, level)
        ci90 = _interval(d, means, 0.90)
        tosts = {m: _tost_from_means(d, means, m) for m in margins}
        widths = {}
        for block in block_sizes:
            if block <= d.size:
                widths[block] = _interval(d, block_bootstrap_means(d, block, resamples, seed), level).width
        pairs.append(
            PairResult(
                a=a,
                b=b,
                mean=ci95.mean,
                ci95=(ci95.lo, ci95.hi),
                ci90=(ci90.lo, ci90.hi),
                zero_in_ci=ci95.contains(0.0),
                verdicts={m: t.equivalent for m, t in tosts.items()},
                p_values={m: t.p_value for m, t in tosts.items()},
                block_widths=widths,
            )
        )
    report = EquivReport(labels, list(margins), pairs, sizes.pop())
    logger.info("All-pairs report: %d pairs, equivalent per margin %s", report.n_pairs, report.counts())
    return report


# -----------------------------------------------------------------------------
# Seed variance
# -----------------------------------------------------------------------------


@dataclass
class SeedVariance:
    per_variant: dict[str, dict[str, float]]
    spread: float
    avg_std: float
    ratio: float
    ratio_flagged: bool
    max_std_ratio: float


def seed_variance(runs: Mapping[str, Sequence[float]]) -> SeedVariance:
    """Inter-variant spread of means against intra-variant seed noise (std with ddof=1)."""
    if not runs:
        raise SampleSizeError("no variants given")
    per_variant = {}
    for label, values in runs.items():
        v = np.asarray(values, dtype=np.float64)
        if v.size < 2:
            raise SampleSizeError(f"variant {label!r} needs at least 2 seeds, got {v.size}")
        per_variant[label] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)), "n": int(v.size)}
    means = [s["mean"] for s in per_variant.values()]
    stds = [s["std"] for s in per_variant.values()]
    spread = float(max(means) - min(means))
    avg_std = float(np.mean(stds))
    max_std = float(max(stds))
    flagged = avg_std == 0.0
    if flagged:
        logger.warning("Average seed std is zero; spread-to-noise ratio reported as infinite")
    ratio = math.inf if flagged else spread / avg_std
    max_ratio = math.inf if max_std == 0.0 else spread / max_std
    return SeedVariance(per_variant, spread, avg_std, ratio, flagged, max_ratio)


# -----------------------------------------------------------------------------
# Loss files
# -----------------------------------------------------------------------------


def write_loss_file(path: Union[str, Path], losses: Iterable[float], header: str = "") -> Path:
    """One real per line; ``header`` lines are written as ``#`` comments."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in header.splitlines():
            f.write(f"# {line}\n")
        for value in losses:
            f.write(f"{float(value)!r}\n")
    return path


def read_loss_file(path: Union[str, Path]) -> tuple[str, np.ndarray]:
    """(label, losses); the label is the file name without extension."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"loss file not found: {path}")
    values = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: not a number: {line!r}") from None
    return path.stem, np.asarray(values, dtype=np.float64)


def read_loss_files(paths: Sequence[Union[str, Path]]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for p in paths:
        label, values = read_loss_file(p)
        if label in out:
            raise ConfigError(f"duplicate variant label {label!r}")
        out[label] = values
    return out
