"""Expert pools and expert-level probes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import numkern as nk
from .errors import ConfigError, DimensionError, UnsupportedOperationError
from .numkern import Tensor
from .routing import RouteDecision

EXPERT_KINDS = ("mlp", "static")


@dataclass
class StaticPool:
    """One fixed update vector per expert, ``vectors`` is ``[M, d_model]``."""

    vectors: Tensor

    @property
    def n_experts(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_model(self) -> int:
        return self.vectors.shape[1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("vectors", self.vectors)]


@dataclass
class MlpPool:
    """Rank-r experts: ``down`` is ``[M, r, d_model]``, ``up`` is ``[M, d_model, r]``."""

    down: Tensor
    up: Tensor

    def __post_init__(self) -> None:
        m, r, d = self.down.shape
        if self.up.shape != (m, d, r):
            raise DimensionError(f"up must have shape {(m, d, r)}, got {self.up.shape}")

    @property
    def n_experts(self) -> int:
        return self.down.shape[0]

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @property
    def d_model(self) -> int:
        return self.down.shape[2]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("down", self.down), ("up", self.up)]


ExpertPool = Union[StaticPool, MlpPool]


def init_pool(kind: str, n_experts: int, d_model: int, rank: int, rng: np.random.Generator) -> ExpertPool:
    std = 1.0 / np.sqrt(d_model)
    if kind == "static":
        return StaticPool(nk.parameter(rng.normal(0.0, std, (n_experts, d_model))))
    if kind == "mlp":
        if rank < 1:
            raise ConfigError(f"expert rank must be >= 1, got {rank}")
        down = rng.normal(0.0, std, (n_experts, rank, d_model))
        up = rng.normal(0.0, std, (n_experts, d_model, rank))
        return MlpPool(nk.parameter(down), nk.parameter(up))
    raise ConfigError(f"unknown expert kind {kind!r}")


def update_static(pool: StaticPool, decision: RouteDecision) -> Tensor:
    """sum_i w_i V_i for each row; the token state does not enter."""
    n, k = decision.indices.shape
    chosen = nk.take(pool.vectors, decision.indices)
    w = nk.reshape(decision.weights, (n, k, 1))
    return nk.sum(nk.mul(chosen, w), axis=1)


def update_mlp(pool: MlpPool, decision: RouteDecision, h_current: Tensor) -> Tensor:
    """sum_i w_i W_up,i SiLU(W_down,i h) for each row of ``h_current``."""
    n, k = decision.indices.shape
    d = pool.d_model
    if h_current.shape != (n, d):
        raise DimensionError(f"expected state of shape {(n, d)}, got {h_current.shape}")
    down = nk.take(pool.down, decision.indices)
    up = nk.take(pool.up, decision.indices)
    h = nk.reshape(h_current, (n, 1, d, 1))
    act = nk.silu(nk.matmul(down, h))
    out = nk.reshape(nk.matmul(up, act), (n, k, d))
    w = nk.reshape(decision.weights, (n, k, 1))
    return nk.sum(nk.mul(out, w), axis=1)


def expert_update(pool: ExpertPool, decision: RouteDecision, h_current: Tensor) -> Tensor:
    if isinstance(pool, StaticPool):
        return update_static(pool, decision)
    return update_mlp(pool, decision, h_current)


def _rank1_vectors(pool: MlpPool) -> tuple[np.ndarray, np.ndarray]:
    if pool.rank != 1:
        raise UnsupportedOperationError(
            f"identity cosines are defined for rank-1 experts only (rank={pool.rank})"
        )
    return pool.down.data[:, 0, :], pool.up.data[:, :, 0]


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.sum(a * b, axis=-1)
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def identity_cosines(pool: MlpPool) -> np.ndarray:
    """Per-expert cosine between the down and up vectors of rank-1 experts."""
    down, up = _rank1_vectors(pool)
    return _row_cosines(down.astype(np.float64), up.astype(np.float64))


def identity_summary(cosines: np.ndarray) -> dict[str, float]:
    a = np.abs(cosines)
    return {
        "mean_cos": float(np.mean(cosines)),
        "mean_abs_cos": float(np.mean(a)),
        "frac_identity_like": float(np.mean(a > 0.8)),
        "frac_orthogonal": float(np.mean(a < 0.2)),
    }


def up_vectors(pool: MlpPool) -> np.ndarray:
    return _rank1_vectors(pool)[1]


def vocab_projection(pool: MlpPool, expert: int, embedding: np.ndarray, n: int) -> np.ndarray:
    """Token ids with the ``n`` largest <embedding_v, w_up>, descending, ties to lowest id."""
    up = up_vectors(pool)
    vocab = embedding.shape[0]
    if not 1 <= n <= vocab:
        raise ConfigError(f"n must lie in [1, {vocab}], got {n}")
    if not 0 <= expert < pool.n_experts:
        raise ConfigError(f"expert {expert} out of range [0, {pool.n_experts})")
    scores = np.asarray(embedding, dtype=np.float64) @ up[expert].astype(np.float64)
    return np.argsort(-scores, kind="stable")[:n]
