"""Pre-LN transformer language model with ST-MoE or dense feed-forward blocks."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import numkern as nk
from .data import VOCAB_SIZE, Batch
from .errors import ConfigError, TokenIndexError
from .experts import ExpertPool, init_pool
from .layer import LayerOutput, StMoeConfig, TrajectoryTrace, moe_update
from .numkern import Tensor
from .routing import RoutingSpace, balance_loss, init_routing_space, routing_param_count

logger = logging.getLogger(__name__)

FFN_MODES = ("stmoe", "dense")
ROPE_BASE = 10000.0
EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    vocab: int = VOCAB_SIZE
    seq_len: int = 128
    d_space: int = 16
    n_experts: int = 64
    top_k: int = 4
    hops: tuple[int, ...] = (3,)
    rank: int = 1
    router: str = "cosine"
    expert_kind: str = "mlp"
    ffn_mode: str = "stmoe"
    d_ff: int = 128
    balance_alpha: float = 0.05
    dropout: float = 0.1
    seed: int = 42
    tau: float = 30.0
    decoupled: bool = False
    magnitude_alpha: Optional[float] = None
    include_kinematic: bool = False
    hash_mode: str = "token"
    halting_eps: Optional[float] = None
    frozen_routing: bool = False

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.ffn_mode not in FFN_MODES:
            raise ConfigError(f"unknown ffn_mode {self.ffn_mode!r}")
        if len(self.hops) not in (1, self.layers):
            raise ConfigError(f"hops needs 1 or {self.layers} entries, got {len(self.hops)}")
        if self.ffn_mode == "dense" and self.d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.ffn_mode == "stmoe":
            for i in range(self.layers):
                self.layer_config(i)

    @property
    def hops_per_layer(self) -> tuple[int, ...]:
        return self.hops if len(self.hops) == self.layers else self.hops * self.layers

    @property
    def max_hops(self) -> int:
        return max(self.hops_per_layer)

    def layer_config(self, layer: int) -> StMoeConfig:
        return StMoeConfig(
            hops=self.hops_per_layer[layer],
            top_k=self.top_k,
            router=self.router,
            expert_kind=self.expert_kind,
            rank=self.rank,
            decoupled=self.decoupled,
            magnitude_alpha=self.magnitude_alpha,
            halting_eps=self.halting_eps,
            frozen_routing=self.frozen_routing,
            hash_mode=self.hash_mode,
        )

    def architecture(self) -> dict:
        """Fields that fix parameter shapes."""
        d = asdict(self)
        for key in ("balance_alpha", "dropout", "seed", "halting_eps", "frozen_routing", "tau"):
            d.pop(key)
        return d


@dataclass
class MoeSublayer:
    cfg: StMoeConfig
    space: RoutingSpace
    pool: ExpertPool


@dataclass
class Block:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    moe: Optional[MoeSublayer] = None
    w1: Optional[Tensor] = None
    w2: Optional[Tensor] = None


@dataclass
class LayerTelemetry:
    trace: Optional[TrajectoryTrace] = None
    probs: list[Tensor] = field(default_factory=list)
    indices: list[np.ndarray] = field(default_factory=list)
    attn_norms: Optional[np.ndarray] = None
    update_norms: Optional[np.ndarray] = None


@dataclass
class ForwardOutput:
    logits: Tensor
    layers: list[LayerTelemetry]

    def traces(self) -> list[TrajectoryTrace]:
        return [t.trace for t in self.layers if t.trace is not None]

    def avg_hops(self) -> float:
        traces = self.traces()
        if not traces:
            return 0.0
        return float(np.mean([t.avg_hops() for t in traces]))


@dataclass
class LossOutput:
    total: Tensor
    lm: Tensor
    balance: Optional[Tensor]
    avg_hops: float
    forwards: list[ForwardOutput]

    @property
    def forward(self) -> ForwardOutput:
        return self.forwards[0]

    @property
    def balance_value(self) -> float:
        return self.balance.item() if self.balance is not None else 0.0


def dense_ffn_forward(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return nk.matmul(nk.silu(nk.matmul(x, w1)), w2)


class StMoeLM:
    """Byte-level causal LM; embedding and output head share ``embed.weight``."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> None:
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._params: dict[str, Tensor] = {}
        d = cfg.d_model
        attn_std = 1.0 / np.sqrt(d)
        out_scale = 1.0 / np.sqrt(2.0 * cfg.layers)

        self.embed = self._register("embed.weight", nk.parameter(rng.normal(0.0, EMBED_STD, (cfg.vocab, d))))
        self.blocks: list[Block] = []
        for i in range(cfg.layers):
            p = f"blocks.{i}"
            blk = Block(
                ln1_gain=self._register(f"{p}.ln1.gain", nk.parameter(np.ones(d))),
                ln1_bias=self._register(f"{p}.ln1.bias", nk.parameter(np.zeros(d))),
                wq=self._register(f"{p}.attn.wq", nk.parameter(rng.normal(0.0, attn_std, (d, d)))),
                wk=self._register(f"{p}.attn.wk", nk.parameter(rng.normal(0.0, attn_std, (d, d)))),
                wv=self._register(f"{p}.attn.wv", nk.parameter(rng.normal(0.0, attn_std, (d, d)))),
                wo=self._register(
                    f"{p}.attn.wo", nk.parameter(rng.normal(0.0, attn_std * out_scale, (d, d)))
                ),
                ln2_gain=self._register(f"{p}.ln2.gain", nk.parameter(np.ones(d))),
                ln2_bias=self._register(f"{p}.ln2.bias", nk.parameter(np.zeros(d))),
            )
            if cfg.ffn_mode == "stmoe":
                lcfg = cfg.layer_config(i)
                space = init_routing_space(
                    cfg.router,
                    d,
                    cfg.d_space,
                    cfg.n_experts,
                    rng,
                    tau=cfg.tau,
                    projections=lcfg.projections,
                    include_kinematic=cfg.include_kinematic,
                    layer=i,
                    hash_mode=cfg.hash_mode,
                )
                pool = init_pool(cfg.expert_kind, cfg.n_experts, d, cfg.rank, rng)
                for name, t in space.parameters():
                    self._register(f"{p}.moe.{name}", t)
                for name, t in pool.parameters():
                    self._register(f"{p}.moe.experts.{name}", t)
                blk.moe = MoeSublayer(lcfg, space, pool)
            else:
                blk.w1 = self._register(
                    f"{p}.ffn.w1", nk.parameter(rng.normal(0.0, attn_std, (d, cfg.d_ff)))
                )
                blk.w2 = self._register(
                    f"{p}.ffn.w2",
                    nk.parameter(rng.normal(0.0, out_scale / np.sqrt(cfg.d_ff), (cfg.d_ff, d))),
                )
            self.blocks.append(blk)
        self.ln_f_gain = self._register("ln_f.gain", nk.parameter(np.ones(d)))
        self.ln_f_bias = self._register("ln_f.bias", nk.parameter(np.zeros(d)))
        self.alpha: Optional[Tensor] = None
        if cfg.ffn_mode == "stmoe" and cfg.magnitude_alpha is not None:
            self.alpha = self._register("alpha", nk.parameter(np.array([cfg.magnitude_alpha])))
        logger.debug("Built %s model with %d parameter blocks", cfg.ffn_mode, len(self._params))

    def _register(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self._params[name] = t
        return t

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def parameter(self, name: str) -> Tensor:
        return self._params[name]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _attention(self, blk: Block, a: Tensor) -> Tensor:
        b, s, d = a.shape
        heads = self.cfg.heads
        hd = d // heads

        def split_heads(w: Tensor, rotate: bool) -> Tensor:
            t = nk.reshape(nk.matmul(a, w), (b, s, heads, hd))
            if rotate:
                t = nk.rope_apply(t, base=ROPE_BASE)
            return nk.transpose(t, (0, 2, 1, 3))

        q = split_heads(blk.wq, True)
        k = split_heads(blk.wk, True)
        v = split_heads(blk.wv, False)
        scores = nk.mul(nk.matmul(q, nk.swap_last(k)), 1.0 / np.sqrt(hd))
        causal = np.tril(np.ones((s, s), dtype=bool))
        attn = nk.matmul(nk.softmax(scores, mask=causal), v)
        merged = nk.reshape(nk.transpose(attn, (0, 2, 1, 3)), (b, s, d))
        return nk.matmul(merged, blk.wo)

    def forward(
        self,
        tokens: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        halting_eps: Optional[float] = None,
        frozen_routing: Optional[bool] = None,
        zero_experts: bool = False,
        detail: bool = False,
    ) -> ForwardOutput:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ConfigError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise TokenIndexError(f"token id out of range [0, {self.cfg.vocab})")
        b, s = tokens.shape
        d = self.cfg.d_model
        drop = self.cfg.dropout if train else 0.0
        drop_rng = rng if train else None
        if train:
            # halting is inference-only
            halting_eps = 0.0

        x = nk.take(self.embed, tokens)
        telemetry: list[LayerTelemetry] = []
        for blk in self.blocks:
            tel = LayerTelemetry()
            attn = nk.dropout(self._attention(blk, nk.layer_norm(x, blk.ln1_gain, blk.ln1_bias)), drop, drop_rng)
            x = nk.add(x, attn)
            h = nk.reshape(nk.layer_norm(x, blk.ln2_gain, blk.ln2_bias), (b * s, d))
            update: Optional[Tensor] = None
            if blk.moe is not None:
                if not zero_experts:
                    res: LayerOutput = moe_update(
                        blk.moe.cfg,
                        blk.moe.space,
                        blk.moe.pool,
                        h,
                        alpha=self.alpha,
                        token_ids=tokens.reshape(-1),
                        positions=np.tile(np.arange(s), b),
                        halting_eps=halting_eps,
                        frozen_routing=frozen_routing,
                        detail=detail,
                    )
                    update = res.update
                    tel.trace, tel.probs, tel.indices = res.trace, res.probs, res.indices
            else:
                assert blk.w1 is not None and blk.w2 is not None
                update = dense_ffn_forward(h, blk.w1, blk.w2)
            if detail:
                tel.attn_norms = np.linalg.norm(attn.data, axis=-1).reshape(-1)
                tel.update_norms = (
                    np.linalg.norm(update.data, axis=-1) if update is not None else np.zeros(b * s)
                )
            if update is not None:
                x = nk.add(x, nk.dropout(nk.reshape(update, (b, s, d)), drop, drop_rng))
            telemetry.append(tel)

        x = nk.layer_norm(x, self.ln_f_gain, self.ln_f_bias)
        logits = nk.matmul(x, nk.transpose(self.embed))
        return ForwardOutput(logits=logits, layers=telemetry)

    def balance_term(self, outs: Union[ForwardOutput, Sequence[ForwardOutput]]) -> Optional[Tensor]:
        """Summed per-layer balance losses; rows of all ``outs`` pool into one load estimate."""
        if self.cfg.balance_alpha == 0:
            return None
        outs = [outs] if isinstance(outs, ForwardOutput) else list(outs)
        total: Optional[Tensor] = None
        for li in range(len(self.blocks)):
            probs = [p for o in outs for p in o.layers[li].probs]
            indices = [ix for o in outs for ix in o.layers[li].indices]
            if not probs:
                continue
            term = balance_loss(probs, indices, self.cfg.balance_alpha)
            total = term if total is None else nk.add(total, term)
        return total

    def loss(
        self,
        batch: Union[Batch, Sequence[Batch]],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        **forward_kwargs: object,
    ) -> LossOutput:
        """Cross-entropy plus the summed per-layer balance losses.

        A sequence of batches is scored as one window: the cross-entropy is
        token-weighted over all of them and the balance statistics are pooled,
        so micro-batches give the same loss as their concatenation.
        """
        window = [batch] if isinstance(batch, Batch) else list(batch)
        if not window:
            raise ConfigError("loss needs at least one batch")
        n_total = sum(bt.n_tokens for bt in window)
        outs: list[ForwardOutput] = []
        lm: Optional[Tensor] = None
        for bt in window:
            out = self.forward(bt.inputs, train=train, rng=rng, **forward_kwargs)  # type: ignore[arg-type]
            b, s, v = out.logits.shape
            ce = nk.cross_entropy(nk.reshape(out.logits, (b * s, v)), bt.targets.reshape(-1))
            if len(window) > 1:
                ce = nk.mul(ce, bt.n_tokens / n_total)
            lm = ce if lm is None else nk.add(lm, ce)
            outs.append(out)
        assert lm is not None
        bal = self.balance_term(outs)
        total = lm if bal is None else nk.add(lm, bal)
        avg_hops = float(np.mean([o.avg_hops() for o in outs]))
        return LossOutput(total=total, lm=lm, balance=bal, avg_hops=avg_hops, forwards=outs)


# -----------------------------------------------------------------------------
# Parameter accounting
# -----------------------------------------------------------------------------


@dataclass
class ParamBreakdown:
    embedding: int = 0
    attention: int = 0
    norms: int = 0
    routing: int = 0
    experts: int = 0
    dense_ffn: int = 0
    alpha: int = 0

    @property
    def total(self) -> int:
        return sum(asdict(self).values())

    def as_dict(self) -> dict[str, int]:
        d = asdict(self)
        d["total"] = self.total
        return d


def param_category(name: str) -> str:
    if name.startswith("embed."):
        return "embedding"
    if name == "alpha":
        return "alpha"
    if name.startswith("ln_f.") or ".ln1." in name or ".ln2." in name:
        return "norms"
    if ".attn." in name:
        return "attention"
    if ".moe.experts." in name:
        return "experts"
    if ".moe." in name:
        return "routing"
    if ".ffn." in name:
        return "dense_ffn"
    raise KeyError(name)


def param_count(cfg: ModelConfig) -> ParamBreakdown:
    """Analytic parameter counts; the tied head adds nothing beyond the embedding."""
    d, L = cfg.d_model, cfg.layers
    out = ParamBreakdown(
        embedding=cfg.vocab * d,
        attention=4 * d * d * L,
        norms=2 * d * (2 * L + 1),
    )
    if cfg.ffn_mode == "dense":
        out.dense_ffn = 2 * d * cfg.d_ff * L
        return out
    for hops in cfg.hops_per_layer:
        out.routing += routing_param_count(
            cfg.router,
            d,
            cfg.d_space,
            cfg.n_experts,
            1,
            cfg.include_kinematic,
            projections=hops if cfg.decoupled else 1,
        )
    per_expert = d if cfg.expert_kind == "static" else 2 * d * cfg.rank
    out.experts = cfg.n_experts * per_expert * L
    out.alpha = 1 if cfg.magnitude_alpha is not None else 0
    return out


def enumerate_params(model: StMoeLM) -> ParamBreakdown:
    """Counts by walking the instantiated parameter blocks."""
    out = ParamBreakdown()
    for name, t in model.named_parameters():
        cat = param_category(name)
        setattr(out, cat, getattr(out, cat) + t.size)
    return out


def pool_of(model: StMoeLM, layer: int) -> ExpertPool:
    moe = model.blocks[layer].moe
    if moe is None:
        raise ConfigError("dense blocks have no expert pool")
    return moe.pool


