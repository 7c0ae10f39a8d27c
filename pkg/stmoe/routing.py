"""Routing mechanisms, balance loss and routing-parameter accounting.

Geometric routers (``cosine`` and ``random_fixed``) project a token into a
low-dimensional routing space and score it by cosine similarity against
per-expert centroids. ``linear`` is the standard learned-logit router and
``hash`` a parameter-free deterministic assignment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from . import numkern as nk
from .errors import ConfigError, DimensionError, UnsupportedOperationError
from .numkern import Tensor

logger = logging.getLogger(__name__)

ROUTER_KINDS = ("cosine", "linear", "hash", "random_fixed")
GEOMETRIC_KINDS = ("cosine", "random_fixed")
HASH_MODES = ("token", "position")
DEFAULT_TAU = 30.0


@dataclass
class RoutingSpace:
    kind: str
    n_experts: int
    tau: float = DEFAULT_TAU
    proj_in: list[Tensor] = field(default_factory=list)
    centroids: Optional[Tensor] = None
    kinematic: Optional[Tensor] = None
    linear_weights: Optional[Tensor] = None
    layer: int = 0
    hash_mode: str = "token"

    def __post_init__(self) -> None:
        if self.kind not in ROUTER_KINDS:
            raise ConfigError(f"unknown router kind {self.kind!r}")
        if self.hash_mode not in HASH_MODES:
            raise ConfigError(f"unknown hash mode {self.hash_mode!r}")
        geometric = self.kind in GEOMETRIC_KINDS
        if geometric != bool(self.proj_in) or geometric != (self.centroids is not None):
            raise ConfigError(f"{self.kind} routing needs proj_in and centroids exactly when geometric")
        if self.kinematic is not None and not geometric:
            raise ConfigError("kinematic vectors only exist for geometric routing")
        if (self.kind == "linear") != (self.linear_weights is not None):
            raise ConfigError("linear_weights are present exactly for linear routing")

    @property
    def is_geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    def parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = [(f"proj_in.{i}", p) for i, p in enumerate(self.proj_in)]
        if self.centroids is not None:
            named.append(("centroids", self.centroids))
        if self.kinematic is not None:
            named.append(("kinematic", self.kinematic))
        if self.linear_weights is not None:
            named.append(("router", self.linear_weights))
        return named


@dataclass
class RouteDecision:
    """Top-k selection for a batch of rows.

    ``indices`` is an int array ``[N, k]``, ``weights`` a tensor ``[N, k]``
    and ``probs`` the full ``[N, M]`` distribution (absent for hash routing).
    """

    indices: np.ndarray
    weights: Tensor
    probs: Optional[Tensor] = None

    @property
    def k(self) -> int:
        return int(self.indices.shape[-1])


def init_routing_space(
    kind: str,
    d_model: int,
    d_space: int,
    n_experts: int,
    rng: np.random.Generator,
    tau: float = DEFAULT_TAU,
    projections: int = 1,
    include_kinematic: bool = False,
    layer: int = 0,
    hash_mode: str = "token",
) -> RoutingSpace:
    """Allocate routing parameters for one layer.

    Per-hop projections (``projections > 1``) start as copies of the first,
    so a decoupled layer matches the shared layer until training moves them.
    """
    if kind not in ROUTER_KINDS:
        raise ConfigError(f"unknown router kind {kind!r}")
    if kind == "hash":
        return RoutingSpace(kind, n_experts, tau, layer=layer, hash_mode=hash_mode)
    if kind == "linear":
        w = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, n_experts))
        return RoutingSpace(kind, n_experts, tau, linear_weights=nk.parameter(w), layer=layer)

    proj = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_space))
    proj_in = [nk.parameter(proj.copy()) for _ in range(max(1, projections))]
    centroids = nk.parameter(
        rng.normal(0.0, 1.0, (n_experts, d_space)), trainable=(kind == "cosine")
    )
    kinematic = None
    if include_kinematic:
        kinematic = nk.parameter(rng.normal(0.0, 1.0, (n_experts, d_space)), trainable=False)
    return RoutingSpace(
        kind,
        n_experts,
        tau,
        proj_in=proj_in,
        centroids=centroids,
        kinematic=kinematic,
        layer=layer,
        hash_mode=hash_mode,
    )


def position(space: RoutingSpace, h: Tensor, hop: int = 0) -> Tensor:
    """L2-normalised projection of ``h`` ([N, d_model]) into routing space."""
    if not space.is_geometric:
        raise UnsupportedOperationError(f"{space.kind} routing has no routing-space position")
    proj = space.proj_in[hop] if len(space.proj_in) > 1 else space.proj_in[0]
    if h.shape[-1] != proj.shape[0]:
        raise DimensionError(f"state width {h.shape[-1]} does not match proj_in {proj.shape}")
    return nk.l2_normalize(nk.matmul(h, proj))


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p: ties go to the lowest expert index
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def route(space: RoutingSpace, pos_or_h: Tensor, k: int) -> RouteDecision:
    """Softmax over experts, top-k, renormalise the selected probabilities."""
    m = space.n_experts
    if not 1 <= k <= m:
        raise ConfigError(f"top_k must lie in [1, {m}], got {k}")
    if space.kind == "hash":
        raise UnsupportedOperationError("hash routing is resolved with hash_route")
    if space.kind == "linear":
        assert space.linear_weights is not None
        logits = nk.matmul(pos_or_h, space.linear_weights)
    else:
        assert space.centroids is not None
        centroids = nk.l2_normalize(space.centroids)
        logits = nk.mul(nk.matmul(pos_or_h, nk.swap_last(centroids)), space.tau)
    probs = nk.softmax(logits)
    indices = top_k_indices(probs.data, k)
    selected = nk.take_along(probs, indices)
    weights = nk.div(selected, nk.sum(selected, axis=-1, keepdims=True))
    return RouteDecision(indices=indices, weights=weights, probs=probs)


# -----------------------------------------------------------------------------
# Hash routing
# -----------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hash_key(ids: np.ndarray, layer: int, slot: int, probe: np.ndarray) -> np.ndarray:
    z = _splitmix64(ids.astype(np.uint64))
    z = _splitmix64(z ^ np.uint64(layer))
    return _splitmix64(z ^ ((np.uint64(slot) << np.uint64(32)) | probe.astype(np.uint64)))


def hash_indices(ids: np.ndarray, layer: int, n_experts: int, k: int) -> np.ndarray:
    """k distinct experts per id from splitmix64 over (id, layer, slot, probe)."""
    if not 1 <= k <= n_experts:
        raise ConfigError(f"top_k must lie in [1, {n_experts}], got {k}")
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    out = np.empty((ids.shape[0], k), dtype=np.int64)
    for slot in range(k):
        probe = np.zeros(ids.shape[0], dtype=np.int64)
        pending = np.arange(ids.shape[0])
        while pending.size:
            cand = (_hash_key(ids[pending], layer, slot, probe[pending]) % np.uint64(n_experts)).astype(np.int64)
            clash = (out[pending, :slot] == cand[:, None]).any(axis=1)
            done = pending[~clash]
            out[done, slot] = cand[~clash]
            pending = pending[clash]
            probe[pending] += 1
    return out


@lru_cache(maxsize=64)
def _hash_table(layer: int, n_experts: int, k: int, size: int) -> np.ndarray:
    table = hash_indices(np.arange(size), layer, n_experts, k)
    table.setflags(write=False)
    return table


def hash_route(
    token_id: Union[int, np.ndarray], layer: int, n_experts: int, k: int
) -> RouteDecision:
    ids = np.atleast_1d(np.asarray(token_id, dtype=np.int64))
    if ids.size and ids.min() >= 0 and ids.max() < 4096:
        indices = _hash_table(layer, n_experts, k, 4096)[ids]
    else:
        indices = hash_indices(ids, layer, n_experts, k)
    weights = Tensor(np.full(indices.shape, 1.0 / k))
    return RouteDecision(indices=indices, weights=weights, probs=None)


# -----------------------------------------------------------------------------
# Balance loss and accounting
# -----------------------------------------------------------------------------


def expert_load(indices: Union[np.ndarray, Sequence[np.ndarray]], n_experts: int) -> np.ndarray:
    """Fraction of routed (row, slot) assignments that land on each expert."""
    if isinstance(indices, np.ndarray):
        indices = [indices]
    flat = np.concatenate([np.asarray(i).reshape(-1) for i in indices]) if indices else np.zeros(0, np.int64)
    counts = np.bincount(flat, minlength=n_experts).astype(np.float64)
    return counts / max(1, flat.size)


def balance_loss(
    probs: Union[Tensor, Sequence[Tensor]],
    indices: Union[np.ndarray, Sequence[np.ndarray]],
    alpha: float,
) -> Tensor:
    """alpha * M * sum_i f_i * p_i over all rows of all given hops.

    f_i counts each of the k slots as one assignment; p_i is the mean
    router probability. Gradient flows through p only.
    """
    probs_list = [probs] if isinstance(probs, Tensor) else list(probs)
    if not probs_list:
        raise DimensionError("balance_loss needs at least one row")
    m = probs_list[0].shape[-1]
    rows = 0
    total: Optional[Tensor] = None
    for p in probs_list:
        rows += p.shape[0]
        s = nk.sum(p, axis=0)
        total = s if total is None else nk.add(total, s)
    assert total is not None
    if rows < 1:
        raise DimensionError("balance_loss needs at least one row")
    f = expert_load(indices, m).astype(probs_list[0].data.dtype)
    p_mean = nk.mul(total, 1.0 / rows)
    return nk.mul(nk.sum(nk.mul(p_mean, f)), alpha * m)


def gini(fractions: np.ndarray) -> float:
    x = np.sort(np.asarray(fractions, dtype=np.float64))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.sum(ranks * x) / (n * x.sum()) - (n + 1) / n)


def routing_param_count(
    kind: str,
    d_model: int,
    d_space: int,
    n_experts: int,
    layers: int,
    include_kinematic: bool,
    projections: int = 1,
) -> int:
    if min(d_model, n_experts, layers) < 1:
        raise ConfigError("routing dimensions must be positive")
    if kind in GEOMETRIC_KINDS:
        per_expert = 2 if include_kinematic else 1
        return layers * d_space * (projections * d_model + per_expert * n_experts)
    if kind == "linear":
        return layers * d_model * n_experts
    if kind == "hash":
        return 0
    raise ConfigError(f"unknown router kind {kind!r}")
