"""Multi-hop ST-MoE layer with semantic re-routing and relative-norm halting.

Each hop routes the token, applies the selected experts to the current
state ``x + h_accum`` and accumulates the update. Geometric routers then
re-project the new state into routing space for the next hop. With a
halting threshold, a token stops once its relative update norm falls
below it; the triggering update is kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numkern as nk
from .errors import ConfigError, DimensionError
from .experts import EXPERT_KINDS, ExpertPool, expert_update
from .numkern import Tensor
from .routing import HASH_MODES, ROUTER_KINDS, RouteDecision, RoutingSpace, hash_route, position, route

logger = logging.getLogger(__name__)

HALT_EPS = 1e-6


@dataclass(frozen=True)
class StMoeConfig:
    hops: int
    top_k: int
    router: str = "cosine"
    expert_kind: str = "mlp"
    rank: int = 1
    decoupled: bool = False
    magnitude_alpha: Optional[float] = None
    halting_eps: Optional[float] = None
    frozen_routing: bool = False
    hash_mode: str = "token"

    def __post_init__(self) -> None:
        if self.hops < 1:
            raise ConfigError(f"hops must be >= 1, got {self.hops}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.router not in ROUTER_KINDS:
            raise ConfigError(f"unknown router kind {self.router!r}")
        if self.expert_kind not in EXPERT_KINDS:
            raise ConfigError(f"unknown expert kind {self.expert_kind!r}")
        if self.halting_eps is not None and self.halting_eps < 0:
            raise ConfigError(f"halting_eps must be >= 0, got {self.halting_eps}")
        if self.hash_mode not in HASH_MODES:
            raise ConfigError(f"unknown hash mode {self.hash_mode!r}")
        if self.decoupled and self.router not in ("cosine", "random_fixed"):
            raise ConfigError("decoupled routing needs a geometric router")

    @property
    def projections(self) -> int:
        return self.hops if self.decoupled else 1


@dataclass
class TrajectoryTrace:
    """Per-hop, per-token telemetry of one layer forward.

    Arrays are indexed ``[hop, token, ...]``; entries of hops a token did
    not execute hold -1 (indices) or 0 and are masked by ``executed``.
    ``halted_at`` is the hop index at which a token halted, or -1.
    """

    hops: int
    indices: np.ndarray
    weights: np.ndarray
    delta_norms: np.ndarray
    rel_norms: np.ndarray
    executed: np.ndarray
    halted_at: np.ndarray
    positions: Optional[np.ndarray] = None
    deltas: Optional[np.ndarray] = None

    @property
    def n_tokens(self) -> int:
        return int(self.executed.shape[1])

    def hop_counts(self) -> np.ndarray:
        return self.executed.sum(axis=0)

    @property
    def executed_hops(self) -> int:
        return int(self.executed.sum())

    def avg_hops(self) -> float:
        if self.n_tokens == 0:
            return 0.0
        return self.executed_hops / self.n_tokens

    def records(self) -> list[dict]:
        """Line-delimited dump: one record per executed (token, hop)."""
        out = []
        for hop, tok in zip(*np.nonzero(self.executed)):
            out.append(
                {
                    "token": int(tok),
                    "hop": int(hop),
                    "experts": [int(i) for i in self.indices[hop, tok]],
                    "weights": [float(w) for w in self.weights[hop, tok]],
                    "delta_norm": float(self.delta_norms[hop, tok]),
                    "rel_norm": float(self.rel_norms[hop, tok]),
                    "halted": bool(self.halted_at[tok] == hop),
                }
            )
        return out


@dataclass
class LayerOutput:
    update: Tensor
    trace: TrajectoryTrace
    probs: list[Tensor] = field(default_factory=list)
    indices: list[np.ndarray] = field(default_factory=list)


def _empty_trace(hops: int, n: int, k: int, d_space: int, d_model: int, detail: bool) -> TrajectoryTrace:
    return TrajectoryTrace(
        hops=hops,
        indices=np.full((hops, n, k), -1, dtype=np.int64),
        weights=np.zeros((hops, n, k)),
        delta_norms=np.zeros((hops, n)),
        rel_norms=np.zeros((hops, n)),
        executed=np.zeros((hops, n), dtype=bool),
        halted_at=np.full(n, -1, dtype=np.int64),
        positions=np.zeros((hops, n, d_space)) if detail and d_space else None,
        deltas=np.zeros((hops, n, d_model)) if detail else None,
    )


def _rows(t: Tensor, active: np.ndarray, full: bool) -> Tensor:
    return t if full else nk.take(t, active)


def moe_update(
    cfg: StMoeConfig,
    space: RoutingSpace,
    pool: ExpertPool,
    x: Tensor,
    alpha: Optional[Tensor] = None,
    token_ids: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    halting_eps: Optional[float] = None,
    frozen_routing: Optional[bool] = None,
    detail: bool = False,
) -> LayerOutput:
    """Run the hop loop on rows of ``x`` ([N, d_model]) and return the scaled update.

    The update is ``alpha * h_accum`` when ``alpha`` is given, else ``h_accum``.
    ``halting_eps`` and ``frozen_routing`` override the config values.
    """
    n, d = x.shape
    if d != pool.d_model:
        raise DimensionError(f"layer input width {d} does not match expert width {pool.d_model}")
    eps = cfg.halting_eps if halting_eps is None else halting_eps
    frozen = cfg.frozen_routing if frozen_routing is None else frozen_routing
    hops, k = cfg.hops, cfg.top_k
    d_space = space.proj_in[0].shape[1] if space.is_geometric else 0
    trace = _empty_trace(hops, n, k, d_space, d, detail)
    out = LayerOutput(update=Tensor(np.zeros((n, d), dtype=x.data.dtype)), trace=trace)
    if n == 0:
        return out

    hash_keys: Optional[np.ndarray] = None
    if space.kind == "hash":
        hash_keys = token_ids if space.hash_mode == "token" else positions
        if hash_keys is None:
            raise ConfigError(f"hash routing in {space.hash_mode} mode needs {space.hash_mode} ids")
        hash_keys = np.asarray(hash_keys).reshape(-1)
        if hash_keys.shape[0] != n:
            raise DimensionError(f"{hash_keys.shape[0]} hash keys for {n} rows")

    # Routing input from x alone: pos0 for geometric routers, x itself for linear.
    route_in0: Optional[Tensor] = None
    if space.is_geometric:
        route_in0 = position(space, x, hop=0)
    elif space.kind == "linear":
        route_in0 = x

    h_accum: Optional[Tensor] = None
    active = np.arange(n)
    for hop in range(hops):
        if active.size == 0:
            break
        full = active.size == n
        xa = _rows(x, active, full)
        state = xa if h_accum is None else nk.add(xa, _rows(h_accum, active, full))

        decision: RouteDecision
        pos: Optional[Tensor] = None
        if hash_keys is not None:
            decision = hash_route(hash_keys[active], space.layer, space.n_experts, k)
        else:
            assert route_in0 is not None
            if hop == 0 or frozen:
                pos = _rows(route_in0, active, full)
            elif space.is_geometric:
                pos = position(space, state, hop=hop)
            else:
                pos = state
            decision = route(space, pos, k)
            assert decision.probs is not None
            out.probs.append(decision.probs)
            out.indices.append(decision.indices)

        delta = expert_update(pool, decision, state)
        spread = delta if full else nk.scatter_rows(delta, active, n)
        h_accum = spread if h_accum is None else nk.add(h_accum, spread)

        delta_norm = np.linalg.norm(delta.data, axis=-1)
        rel = delta_norm / (np.linalg.norm(state.data, axis=-1) + HALT_EPS)
        trace.indices[hop, active] = decision.indices
        trace.weights[hop, active] = decision.weights.data
        trace.delta_norms[hop, active] = delta_norm
        trace.rel_norms[hop, active] = rel
        trace.executed[hop, active] = True
        if trace.deltas is not None:
            trace.deltas[hop, active] = delta.data
        if trace.positions is not None and pos is not None and space.is_geometric:
            trace.positions[hop, active] = pos.data

        if eps is not None:
            halt = rel < eps
            trace.halted_at[active[halt]] = hop
            active = active[~halt]

    assert h_accum is not None
    out.update = h_accum if alpha is None else nk.mul(h_accum, alpha)
    return out


def forward(
    cfg: StMoeConfig,
    space: RoutingSpace,
    pool: ExpertPool,
    x: Tensor,
    alpha: Optional[Tensor] = None,
    **kwargs: object,
) -> tuple[Tensor, TrajectoryTrace]:
    """``x + h_accum`` (or ``x + alpha * h_accum``) and the hop trace."""
    res = moe_update(cfg, space, pool, x, alpha=alpha, **kwargs)  # type: ignore[arg-type]
    return nk.add(x, res.update), res.trace


def forward_halting(
    cfg: StMoeConfig,
    space: RoutingSpace,
    pool: ExpertPool,
    x: Tensor,
    eps: float,
    alpha: Optional[Tensor] = None,
    **kwargs: object,
) -> tuple[Tensor, TrajectoryTrace]:
    if eps < 0:
        raise ConfigError(f"halting eps must be >= 0, got {eps}")
    return forward(cfg, space, pool, x, alpha=alpha, halting_eps=eps, **kwargs)


def jaccard(a: Sequence[int], b: Sequence[int]) -> float:
    sa, sb = set(int(i) for i in a), set(int(i) for i in b)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def hop_jaccard(trace: TrajectoryTrace) -> Optional[float]:
    """Mean Jaccard of consecutive hops' expert sets; None with fewer than 2 hops."""
    values = []
    for hop in range(1, trace.hops):
        both = np.nonzero(trace.executed[hop - 1] & trace.executed[hop])[0]
        for tok in both:
            values.append(jaccard(trace.indices[hop - 1, tok], trace.indices[hop, tok]))
    if not values:
        return None
    return float(np.mean(values))


def savings_from_avg_hops(avg_hops: float, hops: int) -> float:
    return 1.0 - avg_hops / hops


def flop_savings(traces: Sequence[TrajectoryTrace]) -> float:
    """1 - executed / configured hop-token pairs, as a fraction of MoE FLOPs."""
    configured = sum(t.hops * t.n_tokens for t in traces)
    if configured == 0:
        return 0.0
    executed = sum(t.executed_hops for t in traces)
    return 1.0 - executed / configured
