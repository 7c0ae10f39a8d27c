"""Deterministic training loop: AdamW, warmup + cosine schedule, clipping, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from . import checkpoint
from .config import RunConfig
from .data import Batch, Corpus, batches, eval_batches
from .errors import ConfigError, TrainingDivergedError
from .model import ForwardOutput, StMoeLM
from .numkern import Tape
from .utils import write_records

logger = logging.getLogger(__name__)

_NO_DECAY_MARKERS = (".ln1.", ".ln2.", "ln_f.", "embed.", ".centroids", ".kinematic")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    warmup_steps: int = 200
    final_lr_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    grad_accum: int = 1
    batch_size: int = 8
    seed: int = 42
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.warmup_steps >= self.steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must be < steps={self.steps}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        return cls(
            steps=cfg.steps,
            lr=cfg.lr,
            warmup_steps=cfg.warmup_steps,
            final_lr_fraction=cfg.final_lr_fraction,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
            clip_norm=cfg.clip_norm,
            grad_accum=cfg.grad_accum,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            log_every=cfg.log_every,
            eval_every=cfg.eval_every,
            checkpoint_every=cfg.checkpoint_every,
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``final_lr_fraction * lr`` at ``steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.final_lr_fraction
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamWState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    cfg: TrainConfig,
    lr: float,
    decay: Optional[Sequence[bool]] = None,
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if cfg.weight_decay and (decay is None or decay[i]):
            p *= 1.0 - lr * cfg.weight_decay
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def decays(name: str) -> bool:
    return name != "alpha" and not any(m in name for m in _NO_DECAY_MARKERS)


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


@dataclass
class EvalResult:
    mean_loss: float
    ppl: float
    per_batch: np.ndarray
    executed_hops: int = 0
    hop_slots: int = 0
    token_layers: int = 0

    @property
    def avg_hops(self) -> float:
        return self.executed_hops / self.token_layers if self.token_layers else 0.0

    @property
    def flop_savings(self) -> float:
        return 1.0 - self.executed_hops / self.hop_slots if self.hop_slots else 0.0


def eval_ppl(
    model: StMoeLM,
    val_batches: Sequence[Batch],
    observer: Optional[Callable[[ForwardOutput, Batch], None]] = None,
    **forward_kwargs: Any,
) -> EvalResult:
    """Mean per-token loss of each fixed batch, its mean, and exp(mean)."""
    per_batch = []
    executed = slots = token_layers = 0
    for batch in val_batches:
        out = model.loss(batch, train=False, **forward_kwargs)
        per_batch.append(out.lm.item())
        for trace in out.forward.traces():
            executed += trace.executed_hops
            slots += trace.hops * trace.n_tokens
            token_layers += trace.n_tokens
        if observer is not None:
            observer(out.forward, batch)
    losses = np.asarray(per_batch, dtype=np.float64)
    mean = float(np.mean(losses)) if losses.size else float("nan")
    return EvalResult(mean, float(np.exp(mean)), losses, executed, slots, token_layers)


# -----------------------------------------------------------------------------
# Loop
# -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    records: list[dict]
    final_eval: Optional[EvalResult] = None
    checkpoints: list[Path] = field(default_factory=list)


ProgressCallback = Callable[[int, dict], None]


def train_loop(
    model: StMoeLM,
    train_corpus: Corpus,
    val_corpus: Optional[Corpus],
    config: RunConfig,
    out_dir: Optional[Path] = None,
    on_progress: Optional[ProgressCallback] = None,
    quiet: bool = True,
) -> TrainResult:
    """Train ``model`` in place; metrics go to ``out_dir/metrics.jsonl`` when given.

    The first metrics line embeds the resolved config. A non-finite loss
    appends a ``diverged`` record and raises TrainingDivergedError.
    """
    tc = TrainConfig.from_run_config(config)
    micro = tc.batch_size // tc.grad_accum
    seq_len = config.seq_len
    stream = batches(train_corpus, micro, seq_len, tc.seed)
    drop_rng = np.random.default_rng([tc.seed, 1])
    named = model.trainable_parameters()
    tensors = [t for _, t in named]
    decay_mask = [decays(n) for n, _ in named]
    state = AdamWState.create([t.data for t in tensors])
    val = eval_batches(val_corpus, tc.batch_size, seq_len, config.eval_batches) if val_corpus is not None else []

    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        write_records(metrics_path, [{"config": config.model_dump()}])

    result = TrainResult(records=[])
    tokens_seen = 0
    logger.info("Training %d steps (%d parameter blocks)", tc.steps, len(tensors))
    bar = tqdm(range(1, tc.steps + 1), desc="train", unit="step", disable=quiet)
    for step in bar:
        lr = lr_at(step, tc)
        model.zero_grad()
        window = [next(stream) for _ in range(tc.grad_accum)]
        # One tape per accumulation window; balance statistics pool over all micro-batches.
        with Tape() as tape:
            out = model.loss(window, train=True, rng=drop_rng)
        lm_total, bal_total, hops_total = out.lm.item(), out.balance_value, out.avg_hops
        if not (math.isfinite(lm_total) and math.isfinite(bal_total)):
            diag = {"event": "diverged", "step": step, "lm_loss": lm_total, "balance_loss": bal_total, "lr": lr}
            if metrics_path is not None:
                write_records(metrics_path, [diag], append=True)
            logger.error("Non-finite loss at step %d (lm=%s balance=%s)", step, lm_total, bal_total)
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        tape.backward(out.total)
        tokens_seen += sum(b.n_tokens for b in window)

        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        grads, norm = clip_grad_norm(grads, tc.clip_norm)
        adamw_step([t.data for t in tensors], grads, state, tc, lr, decay_mask)

        record = {
            "step": step,
            "lm_loss": lm_total,
            "balance_loss": bal_total,
            "lr": lr,
            "tokens_seen": tokens_seen,
            "avg_hops": hops_total,
        }
        logger.debug("step %d lm=%.4f bal=%.4f grad_norm=%.3f", step, lm_total, bal_total, norm)
        if step == 1 or step % tc.log_every == 0 or step == tc.steps:
            result.records.append(record)
            if metrics_path is not None:
                write_records(metrics_path, [record], append=True)
            bar.set_postfix(loss=f"{lm_total:.3f}")
        if on_progress is not None:
            on_progress(step, record)

        if tc.eval_every and val and step % tc.eval_every == 0 and step != tc.steps:
            ev = eval_ppl(model, val)
            logger.info("step %d val_loss=%.4f ppl=%.2f", step, ev.mean_loss, ev.ppl)
        if out_dir is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0 and step != tc.steps:
            result.checkpoints.append(checkpoint.save(out_dir / f"step_{step:06d}.ckpt", model, config))
    bar.close()

    if val:
        result.final_eval = eval_ppl(model, val)
        logger.info("Final val_loss=%.4f ppl=%.2f", result.final_eval.mean_loss, result.final_eval.ppl)
    if out_dir is not None:
        result.checkpoints.append(checkpoint.save(out_dir / "model.ckpt", model, config))
    return result
