import numpy as np
import pytest

from stmoe import numkern as nk
from stmoe.errors import ConfigError, DimensionError, UnsupportedOperationError
from stmoe.experts import (
    MlpPool,
    StaticPool,
    expert_update,
    identity_cosines,
    identity_summary,
    init_pool,
    vocab_projection,
)
from stmoe.numkern import Tensor
from stmoe.routing import RouteDecision


def _decision(indices, weights):
    return RouteDecision(np.asarray(indices), Tensor(np.asarray(weights, dtype=float)))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def test_init_pool_shapes():
    rng = np.random.default_rng(0)
    mlp = init_pool("mlp", 6, 8, 2, rng)
    assert mlp.down.shape == (6, 2, 8) and mlp.up.shape == (6, 8, 2)
    assert (mlp.n_experts, mlp.rank, mlp.d_model) == (6, 2, 8)
    static = init_pool("static", 6, 8, 1, rng)
    assert static.vectors.shape == (6, 8)
    with pytest.raises(ConfigError):
        init_pool("conv", 6, 8, 1, rng)


def test_static_update_ignores_state(float64):
    pool = StaticPool(nk.parameter(np.arange(12.0).reshape(4, 3)))
    d = _decision([[0, 2], [3, 1]], [[0.75, 0.25], [0.5, 0.5]])
    a = expert_update(pool, d, Tensor(np.zeros((2, 3)))).data
    b = expert_update(pool, d, Tensor(np.ones((2, 3)))).data
    np.testing.assert_allclose(a, b)
    np.testing.assert_allclose(a[0], 0.75 * np.arange(3.0) + 0.25 * np.arange(6.0, 9.0))


def test_mlp_update_matches_manual(float64):
    rng = np.random.default_rng(3)
    pool = init_pool("mlp", 5, 4, 2, rng)
    h = rng.normal(size=(3, 4))
    d = _decision([[1, 4], [0, 1], [2, 3]], [[0.6, 0.4], [0.5, 0.5], [0.9, 0.1]])
    got = expert_update(pool, d, Tensor(h)).data
    for row in range(3):
        want = np.zeros(4)
        for slot in range(2):
            e = d.indices[row, slot]
            act = _silu(pool.down.data[e] @ h[row])
            want += d.weights.data[row, slot] * (pool.up.data[e] @ act)
        np.testing.assert_allclose(got[row], want)


def test_mlp_update_shape_mismatch():
    pool = init_pool("mlp", 4, 4, 1, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        expert_update(pool, _decision([[0]], [[1.0]]), Tensor(np.ones((2, 4))))


def test_pool_rejects_inconsistent_shapes():
    with pytest.raises(DimensionError):
        MlpPool(nk.parameter(np.ones((2, 1, 4))), nk.parameter(np.ones((2, 3, 1))))


def test_identity_cosines_of_aligned_experts():
    v = np.random.default_rng(0).normal(size=(3, 1, 5))
    pool = MlpPool(nk.parameter(v), nk.parameter(np.swapaxes(v, 1, 2).copy()))
    np.testing.assert_allclose(identity_cosines(pool), 1.0, rtol=1e-6)
    flipped = MlpPool(nk.parameter(v), nk.parameter(-np.swapaxes(v, 1, 2)))
    np.testing.assert_allclose(identity_cosines(flipped), -1.0, rtol=1e-6)


def test_identity_needs_rank_one():
    pool = init_pool("mlp", 4, 4, 2, np.random.default_rng(0))
    with pytest.raises(UnsupportedOperationError):
        identity_cosines(pool)


def test_identity_summary_fractions():
    s = identity_summary(np.array([0.9, -0.95, 0.1, 0.5]))
    assert s["frac_identity_like"] == pytest.approx(0.5)
    assert s["frac_orthogonal"] == pytest.approx(0.25)
    assert s["mean_abs_cos"] == pytest.approx(0.6125)


def test_vocab_projection_order_and_ties():
    up = np.zeros((2, 3, 1))
    up[0, :, 0] = [1.0, 0.0, 0.0]
    pool = MlpPool(nk.parameter(np.ones((2, 1, 3))), nk.parameter(up))
    emb = np.array([[0.0, 0, 0], [2.0, 0, 0], [2.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    assert vocab_projection(pool, 0, emb, 3).tolist() == [1, 2, 3]
    # an all-zero up vector scores every token equally
    assert vocab_projection(pool, 1, emb, 2).tolist() == [0, 1]


def test_vocab_projection_bounds():
    pool = init_pool("mlp", 2, 3, 1, np.random.default_rng(0))
    emb = np.ones((4, 3))
    with pytest.raises(ConfigError):
        vocab_projection(pool, 0, emb, 0)
    with pytest.raises(ConfigError):
        vocab_projection(pool, 0, emb, 5)


def test_rank_one_update_scales_the_up_vector(float64):
    rng = np.random.default_rng(7)
    pool = init_pool("mlp", 4, 6, 1, rng)
    h = rng.normal(size=(2, 6))
    d = _decision([[2], [2]], [[1.0], [1.0]])
    got = expert_update(pool, d, Tensor(h)).data
    down, up = pool.down.data[2, 0], pool.up.data[2, :, 0]
    for row in range(2):
        np.testing.assert_allclose(got[row], _silu(down @ h[row]) * up, rtol=1e-12)
    assert not np.allclose(got[0], got[1])
    # only the component of h along the down vector matters
    ortho = rng.normal(size=6)
    ortho -= (ortho @ down) / (down @ down) * down
    moved = expert_update(pool, d, Tensor(h + ortho)).data
    np.testing.assert_allclose(moved, got, rtol=1e-10, atol=1e-12)


def test_random_expert_identity_matches_random_vector_cosines():
    rng = np.random.default_rng(11)
    pool = init_pool("mlp", 256, 64, 1, rng)
    got = identity_summary(identity_cosines(pool))["mean_abs_cos"]
    a = rng.normal(size=(20000, 64))
    b = rng.normal(size=(20000, 64))
    sampled = np.mean(np.abs(np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))))
    assert sampled == pytest.approx(0.1, abs=0.01)
    assert got == pytest.approx(sampled, abs=0.02)
