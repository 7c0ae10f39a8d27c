import numpy as np
import pytest

from stmoe import checkpoint
from stmoe.config import build_config
from stmoe.data import eval_batches, split
from stmoe.errors import CheckpointError
from stmoe.model import StMoeLM
from stmoe.train import eval_ppl


@pytest.fixture
def run_config():
    return build_config(
        {"d_model": "16", "heads": "2", "n_experts": "8", "d_space": "4", "top_k": "2", "magnitude_alpha": "2.0"}
    )


def test_round_trip(tmp_path, run_config):
    model = StMoeLM(run_config.to_model_config())
    path = checkpoint.save(tmp_path / "m.ckpt", model, run_config)
    cfg, loaded = checkpoint.load(path)
    assert cfg == run_config
    for (na, ta), (nb, tb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_header_layout(run_config):
    data = checkpoint.to_bytes(StMoeLM(run_config.to_model_config()), run_config)
    assert data.startswith(b"STMOE-CKPT 1\n")
    assert b"\n%%\nembed.weight 256,16\n" in data


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(b"hello\n")


def test_version_mismatch(run_config):
    data = checkpoint.to_bytes(StMoeLM(run_config.to_model_config()), run_config)
    with pytest.raises(CheckpointError) as exc:
        checkpoint.from_bytes(data.replace(b"STMOE-CKPT 1", b"STMOE-CKPT 9", 1))
    assert "version" in str(exc.value)


def test_truncated_data(run_config):
    data = checkpoint.to_bytes(StMoeLM(run_config.to_model_config()), run_config)
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(data[:-3])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError) as exc:
        checkpoint.load(tmp_path / "nope.ckpt")
    assert exc.value.code == "checkpoint"


def test_round_trip_preserves_eval_losses(tmp_path, corpus):
    cfg = build_config({"d_model": "16", "heads": "2", "n_experts": "8", "d_space": "4", "top_k": "2", "seq_len": "8"})
    model = StMoeLM(cfg.to_model_config())
    _, val = split(corpus, 0.1)
    batches = eval_batches(val, 2, 8, 3)
    _, loaded = checkpoint.load(checkpoint.save(tmp_path / "m.ckpt", model, cfg))
    np.testing.assert_array_equal(eval_ppl(model, batches).per_batch, eval_ppl(loaded, batches).per_batch)


def test_round_trip_keeps_hash_in_config_values(tmp_path):
    cfg = build_config({"d_model": "16", "heads": "2", "n_experts": "4", "d_space": "4", "top_k": "2", "corpus": "/tmp/x/data#1.txt"})
    loaded_cfg, _ = checkpoint.load(checkpoint.save(tmp_path / "m.ckpt", StMoeLM(cfg.to_model_config()), cfg))
    assert loaded_cfg.corpus == "/tmp/x/data#1.txt"
    assert loaded_cfg == cfg


def test_non_utf8_config_is_a_checkpoint_error(run_config):
    data = checkpoint.to_bytes(StMoeLM(run_config.to_model_config()), run_config)
    broken = data.replace(b"router=cosine", b"router=\xff\xfe", 1)
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(broken)


def test_model_is_rebuilt_in_the_stored_precision(tmp_path):
    cfg = build_config({"d_model": "16", "heads": "2", "n_experts": "4", "d_space": "4", "top_k": "2", "precision": "float64"})
    _, loaded = checkpoint.load(checkpoint.save(tmp_path / "m.ckpt", StMoeLM(cfg.to_model_config()), cfg))
    assert all(t.data.dtype == np.float64 for _, t in loaded.named_parameters())
