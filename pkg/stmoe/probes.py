"""Mechanistic probes over trained checkpoints.

Every probe is read-only: it runs inference-mode forwards and never
touches parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .data import Batch
from .errors import AlignmentError, ProbeError, UnsupportedOperationError
from .experts import MlpPool, identity_cosines, identity_summary, up_vectors, vocab_projection
from .layer import hop_jaccard, jaccard
from .model import ForwardOutput, StMoeLM, pool_of
from .routing import expert_load, gini
from .train import EvalResult, eval_ppl

logger = logging.getLogger(__name__)


@dataclass
class ProbeReport:
    probe: str
    metrics: dict[str, Any]
    sample_size: int
    per_layer: list[dict[str, Any]] = field(default_factory=list)
    rows: list[dict[str, Any]] = field(default_factory=list)

    def records(self) -> list[dict[str, Any]]:
        """Line-delimited form: one summary record, then layer and table rows."""
        out: list[dict[str, Any]] = [
            {"probe": self.probe, "kind": "summary", "sample_size": self.sample_size, **self.metrics}
        ]
        out.extend({"probe": self.probe, "kind": "layer", **r} for r in self.per_layer)
        out.extend({"probe": self.probe, "kind": "row", **r} for r in self.rows)
        return out


def _require_moe(model: StMoeLM, probe: str) -> None:
    if model.cfg.ffn_mode != "stmoe":
        raise UnsupportedOperationError(f"{probe} probe needs an ST-MoE model (ffn_mode=dense)")


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    return np.sum(a * b, axis=-1) / np.where(denom > 0, denom, 1.0) * (denom > 0)


# -----------------------------------------------------------------------------
# Echo chamber
# -----------------------------------------------------------------------------


def echo_cosines(out: ForwardOutput) -> list[np.ndarray]:
    """Per layer: cos(dh_0, dh_1) of every token that executed both hops."""
    per_layer = []
    for tel in out.layers:
        trace = tel.trace
        if trace is None or trace.hops < 2 or trace.deltas is None:
            per_layer.append(np.zeros(0))
            continue
        both = trace.executed[0] & trace.executed[1]
        per_layer.append(_cosines(trace.deltas[0, both], trace.deltas[1, both]))
    return per_layer


def echo_chamber(model: StMoeLM, batches: Sequence[Batch], **forward_kwargs: Any) -> ProbeReport:
    """Token-weighted mean of per-token cosines between the first two hop updates."""
    _require_moe(model, "echo")
    if model.cfg.max_hops < 2:
        raise ProbeError("echo chamber needs at least 2 hops")
    sums = np.zeros(model.cfg.layers)
    counts = np.zeros(model.cfg.layers, dtype=np.int64)
    for batch in batches:
        out = model.forward(batch.inputs, detail=True, **forward_kwargs)
        for i, cos in enumerate(echo_cosines(out)):
            sums[i] += float(np.sum(cos))
            counts[i] += cos.size
    total = int(counts.sum())
    if total == 0:
        raise ProbeError("no token executed two hops")
    per_layer = [
        {"layer": i, "echo_cos": float(sums[i] / counts[i]) if counts[i] else None, "tokens": int(counts[i])}
        for i in range(model.cfg.layers)
    ]
    value = float(sums.sum() / total)
    logger.info("Echo chamber cos(dh0, dh1) = %.4f over %d tokens", value, total)
    return ProbeReport("echo", {"echo_cos": value}, total, per_layer)


# -----------------------------------------------------------------------------
# Frozen routing
# -----------------------------------------------------------------------------


def _eval_with_jaccard(model: StMoeLM, batches: Sequence[Batch], frozen: bool) -> tuple[EvalResult, Optional[float]]:
    values: list[float] = []

    def observe(out: ForwardOutput, _batch: Batch) -> None:
        for trace in out.traces():
            j = hop_jaccard(trace)
            if j is not None:
                values.append(j)

    res = eval_ppl(model, batches, observer=observe, frozen_routing=frozen)
    return res, (float(np.mean(values)) if values else None)


def frozen_routing_eval(model: StMoeLM, batches: Sequence[Batch]) -> ProbeReport:
    """Same checkpoint with and without re-routing between hops."""
    _require_moe(model, "frozen")
    normal, j_normal = _eval_with_jaccard(model, batches, frozen=False)
    frozen, j_frozen = _eval_with_jaccard(model, batches, frozen=True)
    if j_normal is None:
        logger.warning("Hop Jaccard undefined: no layer has 2 or more hops")
    metrics = {
        "normal_ppl": normal.ppl,
        "frozen_ppl": frozen.ppl,
        "ppl_change_pct": 100.0 * (frozen.ppl / normal.ppl - 1.0),
        "normal_jaccard": j_normal,
        "frozen_jaccard": j_frozen,
    }
    return ProbeReport("frozen", metrics, len(batches))


# -----------------------------------------------------------------------------
# Expert identity and cross-seed alignment
# -----------------------------------------------------------------------------


def _mlp_pools(model: StMoeLM, probe: str) -> list[MlpPool]:
    _require_moe(model, probe)
    pools = [pool_of(model, i) for i in range(model.cfg.layers)]
    if not all(isinstance(p, MlpPool) for p in pools):
        raise UnsupportedOperationError(f"{probe} probe needs MLP experts")
    return pools  # type: ignore[return-value]


def identity(model: StMoeLM) -> ProbeReport:
    """Down/up cosine of every rank-1 expert."""
    pools = _mlp_pools(model, "identity")
    per_layer = []
    all_cos = []
    for i, pool in enumerate(pools):
        cos = identity_cosines(pool)
        all_cos.append(cos)
        per_layer.append({"layer": i, **identity_summary(cos)})
    flat = np.concatenate(all_cos)
    return ProbeReport("identity", identity_summary(flat), int(flat.size), per_layer)


def random_jaccard_baseline(vocab: int, n: int, trials: int, rng: np.random.Generator) -> float:
    """Mean Jaccard of two independent random n-subsets of the vocabulary."""
    vals = []
    for _ in range(trials):
        a = rng.choice(vocab, size=n, replace=False)
        b = rng.choice(vocab, size=n, replace=False)
        vals.append(jaccard(a, b))
    return float(np.mean(vals))


def random_best_cosine_baseline(n_experts: int, dim: int, trials: int, rng: np.random.Generator) -> float:
    """Mean best-match cosine of a random unit vector against ``n_experts`` random unit vectors."""
    vals = []
    for _ in range(trials):
        q = rng.normal(size=dim)
        pool = rng.normal(size=(n_experts, dim))
        vals.append(float(np.max(_cosines(pool, q[None, :]))))
    return float(np.mean(vals))


def cross_seed_alignment(
    model_a: StMoeLM,
    model_b: StMoeLM,
    n: int = 10,
    trials: int = 2000,
    seed: int = 42,
) -> ProbeReport:
    """Greedy best match in B for every expert of A, by vocabulary Jaccard and up-vector cosine."""
    if model_a.cfg.architecture() != model_b.cfg.architecture():
        raise AlignmentError("checkpoints have different architectures")
    pools_a = _mlp_pools(model_a, "cross-seed")
    pools_b = _mlp_pools(model_b, "cross-seed")
    emb_a, emb_b = model_a.embed.data, model_b.embed.data
    per_layer = []
    jac_all, cos_all = [], []
    for layer, (pa, pb) in enumerate(zip(pools_a, pools_b)):
        m = pa.n_experts
        vocab_a = [set(vocab_projection(pa, e, emb_a, n).tolist()) for e in range(m)]
        vocab_b = [set(vocab_projection(pb, e, emb_b, n).tolist()) for e in range(m)]
        best_j = np.array([max(len(va & vb) / len(va | vb) for vb in vocab_b) for va in vocab_a])
        ua = up_vectors(pa).astype(np.float64)
        ub = up_vectors(pb).astype(np.float64)
        ua_n = ua / np.maximum(np.linalg.norm(ua, axis=1, keepdims=True), 1e-12)
        ub_n = ub / np.maximum(np.linalg.norm(ub, axis=1, keepdims=True), 1e-12)
        best_c = np.max(ua_n @ ub_n.T, axis=1)
        jac_all.append(best_j)
        cos_all.append(best_c)
        per_layer.append(
            {"layer": layer, "best_jaccard": float(best_j.mean()), "best_cosine": float(best_c.mean())}
        )
    rng = np.random.default_rng(seed)
    cfg = model_a.cfg
    metrics = {
        "best_jaccard": float(np.concatenate(jac_all).mean()),
        "best_cosine": float(np.concatenate(cos_all).mean()),
        "jaccard_baseline": random_jaccard_baseline(cfg.vocab, n, trials, rng),
        "cosine_baseline": random_best_cosine_baseline(cfg.n_experts, cfg.d_model, max(1, trials // 10), rng),
        "top_n": n,
    }
    return ProbeReport("cross-seed", metrics, int(sum(a.size for a in jac_all)), per_layer)


# -----------------------------------------------------------------------------
# Ablations and sweeps
# -----------------------------------------------------------------------------


def expert_zeroing(model: StMoeLM, batches: Sequence[Batch]) -> ProbeReport:
    """Perplexity with every expert update forced to zero (attention-only model)."""
    _require_moe(model, "zeroing")
    base = eval_ppl(model, batches)
    zeroed = eval_ppl(model, batches, zero_experts=True)
    metrics = {"baseline_ppl": base.ppl, "zeroed_ppl": zeroed.ppl, "ratio": zeroed.ppl / base.ppl}
    return ProbeReport("zeroing", metrics, len(batches))


def halting_sweep(model: StMoeLM, batches: Sequence[Batch], eps_grid: Sequence[float]) -> ProbeReport:
    """Average hops, FLOP savings and perplexity change per halting threshold."""
    _require_moe(model, "halt-sweep")
    if model.cfg.max_hops < 2:
        raise ProbeError("halting needs at least 2 hops")
    reference = eval_ppl(model, batches, halting_eps=0.0)
    mean_hops = float(np.mean(model.cfg.hops_per_layer))
    rows = []
    for eps in eps_grid:
        res = reference if eps == 0 else eval_ppl(model, batches, halting_eps=float(eps))
        rows.append(
            {
                "eps": float(eps),
                "avg_hops": res.avg_hops,
                "hops": mean_hops,
                "flop_savings": res.flop_savings,
                "ppl": res.ppl,
                "delta_ppl": res.ppl - reference.ppl,
            }
        )
    return ProbeReport("halt-sweep", {"baseline_ppl": reference.ppl}, len(batches), rows=rows)


def norms(model: StMoeLM, batches: Sequence[Batch]) -> ProbeReport:
    """Expert-update to attention-output norm ratio and routing load Gini per layer."""
    _require_moe(model, "norms")
    layers = model.cfg.layers
    ratios: list[list[np.ndarray]] = [[] for _ in range(layers)]
    loads: list[list[np.ndarray]] = [[] for _ in range(layers)]
    for batch in batches:
        out = model.forward(batch.inputs, detail=True)
        for i, tel in enumerate(out.layers):
            assert tel.attn_norms is not None and tel.update_norms is not None
            ok = tel.attn_norms > 0
            ratios[i].append(tel.update_norms[ok] / tel.attn_norms[ok])
            if tel.trace is not None:
                loads[i].append(tel.trace.indices[tel.trace.executed])
    per_layer = []
    for i in range(layers):
        r = np.concatenate(ratios[i]) if ratios[i] else np.zeros(0)
        load = expert_load(loads[i], model.cfg.n_experts)
        per_layer.append(
            {
                "layer": i,
                "update_to_attn_pct": float(100.0 * r.mean()) if r.size else None,
                "load_gini": gini(load),
                "max_load": float(load.max()),
            }
        )
    pct = [p["update_to_attn_pct"] for p in per_layer if p["update_to_attn_pct"] is not None]
    metrics = {
        "update_to_attn_pct": float(np.mean(pct)) if pct else None,
        "load_gini": float(np.mean([p["load_gini"] for p in per_layer])),
    }
    return ProbeReport("norms", metrics, len(batches), per_layer)
