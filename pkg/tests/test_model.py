import numpy as np
import pytest

from stmoe import numkern as nk
from stmoe.config import load_config
from stmoe.data import Batch, make_batch
from stmoe.errors import ConfigError, TokenIndexError
from stmoe.model import ModelConfig, StMoeLM, enumerate_params, param_category, param_count, pool_of
from stmoe.numkern import Tape

from .helpers import tiny_config, tiny_model


def _tokens(b=2, s=8, seed=0, vocab=256):
    return np.random.default_rng(seed).integers(0, vocab, size=(b, s))


def test_logits_shape_and_telemetry():
    model = tiny_model()
    out = model.forward(_tokens())
    assert out.logits.shape == (2, 8, 256)
    assert len(out.layers) == 2
    assert out.avg_hops() == 3.0
    assert all(len(t.probs) == 3 for t in out.layers)


def test_output_head_is_tied_to_the_embedding():
    names = [n for n, _ in tiny_model().named_parameters()]
    assert "embed.weight" in names
    assert not any("head" in n or "lm_head" in n for n in names)


def test_parameter_names():
    model = tiny_model(decoupled=True, include_kinematic=True, magnitude_alpha=2.0)
    names = {n for n, _ in model.named_parameters()}
    for expected in (
        "blocks.0.moe.proj_in.0",
        "blocks.0.moe.proj_in.2",
        "blocks.1.moe.centroids",
        "blocks.1.moe.kinematic",
        "blocks.0.moe.experts.down",
        "blocks.0.moe.experts.up",
        "blocks.1.attn.wo",
        "ln_f.gain",
        "alpha",
    ):
        assert expected in names
    assert not model.parameter("blocks.0.moe.kinematic").requires_grad


def test_same_seed_same_weights():
    a, b = tiny_model(seed=5), tiny_model(seed=5)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_forward_is_causal():
    model = tiny_model()
    t = _tokens(b=1)
    changed = t.copy()
    changed[0, 5] = (changed[0, 5] + 1) % 256
    a = model.forward(t).logits.data
    b = model.forward(changed).logits.data
    np.testing.assert_allclose(a[0, :5], b[0, :5], rtol=1e-5, atol=1e-6)
    assert not np.allclose(a[0, 5:], b[0, 5:])


def test_token_out_of_range():
    with pytest.raises(TokenIndexError):
        tiny_model().forward(np.array([[1, 256]]))


def test_tokens_must_be_two_dimensional():
    with pytest.raises(ConfigError):
        tiny_model().forward(np.array([1, 2, 3]))


def test_inference_is_deterministic_and_dropout_only_in_training():
    model = tiny_model(dropout=0.5)
    t = _tokens()
    a = model.forward(t).logits.data
    np.testing.assert_array_equal(a, model.forward(t).logits.data)
    trained = model.forward(t, train=True, rng=np.random.default_rng(0)).logits.data
    assert not np.allclose(a, trained)


def test_zero_experts_skips_the_moe():
    model = tiny_model()
    t = _tokens()
    out = model.forward(t, zero_experts=True)
    assert out.traces() == []
    assert not np.allclose(out.logits.data, model.forward(t).logits.data)


def test_loss_and_balance_terms(corpus):
    batch = make_batch(corpus, np.array([0, 100]), 8)
    cosine = tiny_model().loss(batch)
    assert np.isfinite(cosine.total.item())
    assert cosine.balance is not None
    assert cosine.total.item() == pytest.approx(cosine.lm.item() + cosine.balance_value, rel=1e-5)
    assert tiny_model(router="hash").loss(batch).balance is None
    assert tiny_model(ffn_mode="dense").loss(batch).balance is None
    assert tiny_model(balance_alpha=0.0).loss(batch).balance is None


def test_initial_loss_is_near_uniform(corpus):
    batch = make_batch(corpus, np.arange(0, 400, 50), 8)
    lm = tiny_model().loss(batch).lm.item()
    assert lm == pytest.approx(np.log(256.0), rel=0.1)


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"router": "linear"},
        {"router": "hash"},
        {"router": "random_fixed", "include_kinematic": True},
        {"decoupled": True},
        {"expert_kind": "static"},
        {"rank": 3},
        {"magnitude_alpha": 1.5},
        {"hops": (2, 1)},
        {"ffn_mode": "dense", "d_ff": 24},
    ],
)
def test_analytic_counts_match_instantiated(overrides):
    model = tiny_model(**overrides)
    assert enumerate_params(model) == param_count(model.cfg)
    assert param_count(model.cfg).total == model.num_parameters()


def test_large_scale_budgets():
    cosine = param_count(load_config("large_cosine").to_model_config())
    dense = param_count(load_config("large_dense_1120").to_model_config())
    assert cosine.routing == 1_572_864
    assert cosine.experts == 16_777_216
    assert cosine.routing + cosine.experts == dense.dense_ffn == 18_350_080
    assert cosine.total == dense.total
    assert param_count(load_config("large_linear").to_model_config()).routing == 8_388_608
    assert param_count(load_config("large_random_fixed").to_model_config()).routing == 1_048_576
    assert param_count(load_config("large_decoupled").to_model_config()).routing == 2_097_152


def test_wide_space_matches_linear_router_budget():
    wide = param_count(load_config("exp036b_cosine_wide_space").to_model_config())
    linear = param_count(load_config("exp036_linear").to_model_config())
    assert wide.routing == linear.routing


def test_param_category():
    assert param_category("blocks.3.moe.experts.up") == "experts"
    assert param_category("blocks.3.moe.centroids") == "routing"
    assert param_category("blocks.0.ln2.bias") == "norms"
    with pytest.raises(KeyError):
        param_category("mystery")


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=16, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=12, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=3, hops=(1, 2))


def test_pool_of_dense_block():
    with pytest.raises(ConfigError):
        pool_of(tiny_model(ffn_mode="dense"), 0)


def test_full_model_gradients(float64):
    cfg = tiny_config(d_model=8, heads=2, layers=1, vocab=16, seq_len=3, d_space=2, n_experts=4, hops=(2,))
    model = StMoeLM(cfg, rng=np.random.default_rng(1))
    tokens = np.array([[1, 5, 9, 3]])
    batch = Batch(inputs=tokens[:, :-1], targets=tokens[:, 1:], offsets=np.zeros(1, dtype=np.int64))
    params = [t for _, t in model.trainable_parameters()]
    err = nk.check_gradients(lambda: model.loss(batch).total, params)
    assert err < 1e-4


def test_training_forward_never_halts():
    model = tiny_model(halting_eps=1e9)
    tokens = _tokens()
    assert model.forward(tokens).avg_hops() == 1.0
    assert model.forward(tokens, train=True, rng=np.random.default_rng(0)).avg_hops() == 3.0
    assert model.forward(tokens, train=True, rng=np.random.default_rng(0), halting_eps=1e9).avg_hops() == 3.0


def test_window_of_batches_scores_like_their_concatenation(corpus, float64):
    model = tiny_model()
    halves = [make_batch(corpus, np.array([0, 100]), 8), make_batch(corpus, np.array([200, 300]), 8)]
    whole = make_batch(corpus, np.array([0, 100, 200, 300]), 8)
    outs, grads = [], []
    for window in (halves, whole):
        model.zero_grad()
        with Tape() as tape:
            out = model.loss(window)
        tape.backward(out.total)
        outs.append(out)
        grads.append({n: t.grad.copy() for n, t in model.trainable_parameters() if t.grad is not None})
    split_out, whole_out = outs
    assert len(split_out.forwards) == 2 and len(whole_out.forwards) == 1
    assert split_out.lm.item() == pytest.approx(whole_out.lm.item(), rel=1e-12)
    assert split_out.balance_value == pytest.approx(whole_out.balance_value, rel=1e-12)
    assert grads[0].keys() == grads[1].keys()
    for name, g in grads[0].items():
        np.testing.assert_allclose(g, grads[1][name], rtol=1e-9, atol=1e-12)


def test_loss_needs_a_batch():
    with pytest.raises(ConfigError):
        tiny_model().loss([])
