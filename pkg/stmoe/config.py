"""Run configuration: flat ``key=value`` files validated by a pydantic model."""
from __future__ import annotations

import logging
import os
import re
from typing import Any, Iterable, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .layer import StMoeConfig
from .model import ModelConfig
from .utils import get_config_path, parse_bool

logger = logging.getLogger(__name__)

_LIST_FIELDS = ("hops", "eps_grid", "margins", "block_sizes")
_BOOL_FIELDS = ("decoupled", "include_kinematic", "frozen_routing")
_NONE_WORDS = ("none", "null", "")
_COMMENT = re.compile(r"(^|\s)#.*$")


class RunConfig(BaseModel):
    """Merged model, training, data and probe settings of one run."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # model
    d_model: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    vocab: int = Field(256, ge=2)
    layers: int = Field(2, ge=1)
    seq_len: int = Field(128, ge=1)
    d_space: int = Field(16, ge=1)
    n_experts: int = Field(64, ge=1)
    top_k: int = Field(4, ge=1)
    hops: list[int] = Field(default_factory=lambda: [3])
    rank: int = Field(1, ge=1)
    router: str = "cosine"
    expert_kind: str = "mlp"
    ffn_mode: str = "stmoe"
    d_ff: int = Field(128, ge=1)
    tau: float = Field(30.0, gt=0)
    decoupled: bool = False
    magnitude_alpha: Optional[float] = None
    include_kinematic: bool = False
    hash_mode: str = "token"
    halting_eps: Optional[float] = Field(None, ge=0)
    frozen_routing: bool = False
    balance_alpha: float = Field(0.05, ge=0)
    dropout: float = Field(0.1, ge=0, lt=1)

    # training
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(3e-3, gt=0)
    warmup_steps: int = Field(200, ge=0)
    final_lr_fraction: float = Field(0.1, ge=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    clip_norm: float = Field(1.0, gt=0)
    grad_accum: int = Field(1, ge=1)
    seed: int = 42
    log_every: int = Field(10, ge=1)
    eval_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    precision: str = "float32"

    # data
    corpus: Optional[str] = None
    val_fraction: float = Field(0.1, gt=0, lt=0.5)
    eval_batches: int = Field(50, ge=1)

    # probes and statistics
    probe_batches: int = Field(8, ge=1)
    vocab_top_n: int = Field(10, ge=1)
    baseline_trials: int = Field(2000, ge=1)
    eps_grid: list[float] = Field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1, 0.2, 0.5])
    resamples: int = Field(10000, ge=1)
    stats_seed: int = 42
    margins: list[float] = Field(default_factory=lambda: [0.01, 0.02, 0.03])
    block_sizes: list[int] = Field(default_factory=lambda: [1, 5, 10])
    level: float = Field(0.95, gt=0, lt=1)

    @field_validator(*_LIST_FIELDS, mode="before")
    @classmethod
    def _split_list(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [p.strip() for p in v.split(",") if p.strip()]
        if isinstance(v, (int, float)):
            return [v]
        return v

    @field_validator(*_BOOL_FIELDS, mode="before")
    @classmethod
    def _bool(cls, v: Any) -> Any:
        return parse_bool(v)

    @field_validator("router")
    @classmethod
    def _router(cls, v: str) -> str:
        if v not in ("cosine", "linear", "hash", "random_fixed"):
            raise ValueError(f"unknown router {v!r}")
        return v

    @field_validator("expert_kind")
    @classmethod
    def _expert_kind(cls, v: str) -> str:
        if v not in ("mlp", "static"):
            raise ValueError(f"unknown expert kind {v!r}")
        return v

    @field_validator("ffn_mode")
    @classmethod
    def _ffn_mode(cls, v: str) -> str:
        if v not in ("stmoe", "dense"):
            raise ValueError(f"unknown ffn_mode {v!r}")
        return v

    @field_validator("precision")
    @classmethod
    def _precision(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError(f"unknown precision {v!r}")
        return v

    @field_validator("hash_mode")
    @classmethod
    def _hash_mode(cls, v: str) -> str:
        if v not in ("token", "position"):
            raise ValueError(f"unknown hash mode {v!r}")
        return v

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if len(self.hops) not in (1, self.layers) or min(self.hops, default=0) < 1:
            raise ValueError(f"hops needs 1 or {self.layers} positive entries")
        if self.warmup_steps >= self.steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must be < steps={self.steps}")
        if self.batch_size % self.grad_accum:
            raise ValueError("batch_size must be divisible by grad_accum")
        return self

    # ------------------------------------------------------------------

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            heads=self.heads,
            vocab=self.vocab,
            layers=self.layers,
            seq_len=self.seq_len,
            d_space=self.d_space,
            n_experts=self.n_experts,
            top_k=self.top_k,
            hops=tuple(self.hops),
            rank=self.rank,
            router=self.router,
            expert_kind=self.expert_kind,
            ffn_mode=self.ffn_mode,
            d_ff=self.d_ff,
            balance_alpha=self.balance_alpha,
            dropout=self.dropout,
            seed=self.seed,
            tau=self.tau,
            decoupled=self.decoupled,
            magnitude_alpha=self.magnitude_alpha,
            include_kinematic=self.include_kinematic,
            hash_mode=self.hash_mode,
            halting_eps=self.halting_eps,
            frozen_routing=self.frozen_routing,
        )

    def layer_config(self, layer: int = 0) -> StMoeConfig:
        return self.to_model_config().layer_config(layer)

    def to_text(self) -> str:
        """Resolved config as ``key=value`` lines in field order."""
        return "\n".join(f"{k}={_render(v)}" for k, v in self.model_dump().items()) + "\n"

    def log_resolved(self) -> None:
        for line in self.to_text().splitlines():
            logger.info("config %s", line)


def _render(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_render(x) for x in v)
    return str(v)


def parse_pairs(lines: Iterable[str], source: str = "<text>") -> dict[str, str]:
    """``key=value`` lines to a dict; ``#`` comments (at line start or after whitespace) and blank lines skipped, later keys win."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items: Optional[Iterable[str]]) -> dict[str, str]:
    return parse_pairs(items or [], source="--set")


def build_config(pairs: Mapping[str, Any]) -> RunConfig:
    """Validate raw values; unknown keys and bad values raise ConfigError naming the key."""
    unknown = sorted(set(pairs) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    cleaned = {
        k: None if isinstance(v, str) and v.strip().lower() in _NONE_WORDS else v
        for k, v in pairs.items()
    }
    try:
        return RunConfig(**cleaned)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(p) for p in err.get("loc", ())) or "config"
        raise ConfigError(f"{where}: {err.get('msg', 'invalid value')}") from None


def parse_config_text(text: str, source: str = "<text>") -> RunConfig:
    return build_config(parse_pairs(text.splitlines(), source))


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Iterable[str]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """File, then ``--set`` overrides, then ``--seed``.

    ``path`` may also name a shipped config (``exp026_deep``).
    """
    pairs: dict[str, Any] = {}
    if path:
        resolved = path if os.path.isfile(path) else get_config_path(path)
        if not os.path.isfile(resolved):
            raise ConfigError(f"config file not found: {path}")
        with open(resolved, "r", encoding="utf-8") as f:
            pairs.update(parse_pairs(f.read().splitlines(), resolved))
    pairs.update(parse_overrides(overrides))
    if seed is not None:
        pairs["seed"] = seed
    return build_config(pairs)
