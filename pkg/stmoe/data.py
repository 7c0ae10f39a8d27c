"""Byte-level corpus ingestion and deterministic batching."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, CorpusError

logger = logging.getLogger(__name__)

VOCAB_SIZE = 256


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    source_path: str
    vocab_size: int = VOCAB_SIZE

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.targets.size)


def corpus_from_bytes(data: bytes, source_path: str = "<memory>") -> Corpus:
    if not data:
        raise CorpusError(f"corpus is empty: {source_path}")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    return Corpus(tokens=tokens, source_path=source_path)


def load_corpus(path: str) -> Corpus:
    """Read a file as raw bytes; each byte is one token id."""
    if not os.path.isfile(path):
        raise CorpusError(f"corpus file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    corpus = corpus_from_bytes(data, path)
    logger.info("Loaded corpus %s (%d tokens)", path, len(corpus))
    return corpus


def split(corpus: Corpus, val_fraction: float) -> tuple[Corpus, Corpus]:
    """Split off the contiguous tail as validation."""
    if not 0.0 < val_fraction < 0.5:
        raise ConfigError(f"val_fraction must lie in (0, 0.5), got {val_fraction}")
    n = len(corpus)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise CorpusError(f"corpus of {n} tokens is too small to split at {val_fraction}")
    cut = n - n_val
    train = Corpus(corpus.tokens[:cut], corpus.source_path, corpus.vocab_size)
    val = Corpus(corpus.tokens[cut:], corpus.source_path, corpus.vocab_size)
    return train, val


def max_offset(corpus: Corpus, seq_len: int) -> int:
    hi = len(corpus) - seq_len - 1
    if seq_len < 1 or hi < 0:
        raise CorpusError(
            f"corpus of {len(corpus)} tokens is too short for seq_len={seq_len}"
        )
    return hi


def make_batch(corpus: Corpus, offsets: np.ndarray, seq_len: int) -> Batch:
    offsets = np.asarray(offsets, dtype=np.int64)
    idx = offsets[:, None] + np.arange(seq_len + 1)[None, :]
    windows = corpus.tokens[idx]
    return Batch(inputs=windows[:, :-1], targets=windows[:, 1:], offsets=offsets)


def offset_stream(corpus: Corpus, seq_len: int, seed: int) -> Iterator[int]:
    """Window offsets drawn with replacement, one scalar draw per row."""
    hi = max_offset(corpus, seq_len)
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.integers(0, hi + 1))


def batches(corpus: Corpus, batch: int, seq_len: int, seed: int) -> Iterator[Batch]:
    """Endless stream of random-window batches.

    Rows come from one offset stream, so consecutive batches of size b/2
    hold exactly the rows of one batch of size b.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    stream = offset_stream(corpus, seq_len, seed)
    while True:
        offsets = np.fromiter((next(stream) for _ in range(batch)), dtype=np.int64, count=batch)
        yield make_batch(corpus, offsets, seq_len)


def eval_batches(
    corpus: Corpus, batch: int, seq_len: int, n_batches: Optional[int] = None
) -> list[Batch]:
    """Fixed, enumerated validation windows at stride ``seq_len`` from the start."""
    hi = max_offset(corpus, seq_len)
    starts = np.arange(0, hi + 1, seq_len, dtype=np.int64)
    available = len(starts) // batch
    if available < 1:
        raise CorpusError(
            f"validation corpus of {len(corpus)} tokens holds fewer than {batch} windows"
        )
    if n_batches is not None:
        if n_batches > available:
            logger.warning(
                "Requested %d validation batches, only %d fit; using %d",
                n_batches,
                available,
                available,
            )
        available = min(available, n_batches)
    return [
        make_batch(corpus, starts[i * batch : (i + 1) * batch], seq_len)
        for i in range(available)
    ]
