"""Long desk-scale runs. Deselected by default; run with ``pytest -m slow``."""
import logging
import math

import numpy as np
import pytest

from stmoe import checkpoint, probes
from stmoe.config import load_config
from stmoe.data import eval_batches, load_corpus, split
from stmoe.model import StMoeLM
from stmoe.stats import all_pairs_report
from stmoe.train import eval_ppl, train_loop

from .helpers import text_bytes

pytestmark = pytest.mark.slow

logger = logging.getLogger(__name__)


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "desk.txt"
    path.write_bytes(text_bytes(100_000, seed=1))
    return path


def _train(name, corpus_path, out_dir, seed=42, **overrides):
    sets = [f"corpus={corpus_path}"] + [f"{k}={v}" for k, v in overrides.items()]
    config = load_config(name, sets, seed)
    train_c, val_c = split(load_corpus(config.corpus), config.val_fraction)
    model = StMoeLM(config.to_model_config())
    result = train_loop(model, train_c, val_c, config, out_dir)
    return config, model, result, val_c


@pytest.fixture(scope="module")
def trained_deep(desk_corpus, tmp_path_factory):
    return _train("desk_default", desk_corpus, tmp_path_factory.mktemp("deep"))


def test_desk_training_learns(trained_deep):
    config, _, result, _ = trained_deep
    first = result.records[0]["lm_loss"]
    assert first == pytest.approx(math.log(256.0), rel=0.1)
    assert result.final_eval.mean_loss <= 0.8 * math.log(256.0)


def test_checkpoint_preserves_eval_losses(trained_deep, tmp_path):
    config, model, _, val_c = trained_deep
    batches = eval_batches(val_c, config.batch_size, config.seq_len, config.eval_batches)
    _, loaded = checkpoint.load(checkpoint.save(tmp_path / "m.ckpt", model, config))
    np.testing.assert_array_equal(eval_ppl(model, batches).per_batch, eval_ppl(loaded, batches).per_batch)


def test_same_seed_reproduces_metrics_bitwise(desk_corpus, tmp_path):
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        _train("desk_default", desk_corpus, out, steps=60, warmup_steps=6)
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_probe_directions_on_trained_deep(trained_deep):
    config, model, _, val_c = trained_deep
    batches = eval_batches(val_c, config.batch_size, config.seq_len, config.probe_batches)
    frozen = probes.frozen_routing_eval(model, batches).metrics
    zeroed = probes.expert_zeroing(model, batches).metrics
    logger.info("frozen routing change %.2f%%, zeroing ratio %.2f", frozen["ppl_change_pct"], zeroed["ratio"])
    assert math.isfinite(frozen["ppl_change_pct"])
    assert math.isfinite(zeroed["ratio"]) and zeroed["ratio"] > 0


def test_wide_against_deep_report(desk_corpus, tmp_path):
    variants = {}
    for name in ("exp025_wide", "exp026_deep"):
        for seed in (1, 2, 3):
            _, _, result, _ = _train(name, desk_corpus, tmp_path / f"{name}_s{seed}", seed=seed, steps=500, warmup_steps=50)
            variants[f"{name}_s{seed}"] = result.final_eval.per_batch
    report = all_pairs_report(variants, [0.01, 0.02, 0.03], resamples=2000)
    assert report.n_pairs == 15
    assert set(report.counts()) == {0.01, 0.02, 0.03}
    for pair in report.pairs:
        assert pair.ci95[0] <= pair.mean <= pair.ci95[1]
    logger.info("Wide vs deep equivalent pairs per margin: %s", report.counts())
