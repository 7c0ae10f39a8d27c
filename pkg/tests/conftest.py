from __future__ import annotations

import pytest

from stmoe import numkern as nk
from stmoe.config import build_config
from stmoe.data import corpus_from_bytes

from .helpers import text_bytes


@pytest.fixture
def float64():
    with nk.precision("float64"):
        yield


@pytest.fixture
def corpus():
    return corpus_from_bytes(text_bytes(4000), "<test>")


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(text_bytes(4000))
    return path


@pytest.fixture
def tiny_run_config(corpus_file):
    return build_config(
        {
            "d_model": 16,
            "heads": 2,
            "layers": 1,
            "seq_len": 8,
            "d_space": 4,
            "n_experts": 4,
            "top_k": 2,
            "hops": "2",
            "dropout": 0.0,
            "batch_size": 2,
            "steps": 3,
            "warmup_steps": 1,
            "log_every": 2,
            "eval_batches": 2,
            "probe_batches": 2,
            "corpus": str(corpus_file),
        }
    )
