"""Small model and corpus builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from stmoe.model import ModelConfig, StMoeLM

TINY = dict(
    d_model=16,
    heads=2,
    layers=2,
    vocab=256,
    seq_len=8,
    d_space=4,
    n_experts=8,
    top_k=2,
    hops=(3,),
    dropout=0.0,
)


def tiny_config(**overrides) -> ModelConfig:
    fields = dict(TINY)
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_model(seed: int = 0, **overrides) -> StMoeLM:
    return StMoeLM(tiny_config(seed=seed, **overrides))


def text_bytes(n: int, seed: int = 0) -> bytes:
    """Repetitive ASCII with some noise, so a tiny model has something to learn."""
    rng = np.random.default_rng(seed)
    base = b"the quick brown fox jumps over the lazy dog. "
    out = bytearray((base * (n // len(base) + 1))[:n])
    flips = rng.integers(0, n, size=n // 20)
    for i in flips:
        out[i] = int(rng.integers(97, 123))
    return bytes(out)


