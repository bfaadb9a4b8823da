"""Synthetic workloads, the run/sweep drivers and their report formats."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import AttentionConfig
from .block_manager import blocks_needed_prefill
from .engine import (
    POLICY_PRESETS,
    CompressionPolicy,
    Engine,
    StepRecord,
    TokenKV,
)
from .errors import ConfigError, InfeasibleWorkloadError
from .metrics import MetricConfig

STEP_CSV_COLUMNS = (
    "step",
    "batch_size",
    "free_blocks",
    "fragmentation",
    "compressions",
    "preemptions",
    "blocks_freed",
    "admitted",
    "finished",
)
SWEEP_CSV_COLUMNS = (
    "rate",
    "max_batch",
    "steps",
    "throughput_proxy",
    "peak_fragmentation",
)


@dataclass(frozen=True)
class WorkloadConfig:
    """Everything a run needs; defaults are desk scale (seconds, not minutes)."""

    seed: int = 0
    layers: int = 4
    query_heads: int = 8
    kv_heads: int = 2
    head_dim: int = 16
    block_size: int = 4
    num_blocks: int = 4096
    prompt_len: tuple[int, int] = (128, 128)  # inclusive range; fixed when lo == hi
    requests: int = 32
    output_tokens: int = 64
    rate: float = 1.0
    max_cache_tokens: int | None = None  # explicit per-sequence cap, overrides rate
    policy: str = "prefill-preempt"
    metric_mode: str = "window"
    aggregation: str = "L2"
    window: int = 8
    pool: int = 7
    excluded_window: int = 10
    kv_limit: int | None = None
    compress_every: int | None = None
    token_threshold: int | None = None
    budget_floor: int = 128
    budget_mode: str = "min"
    max_steps: int = 1_000_000

    def validate(self) -> None:
        positive = (
            "layers",
            "query_heads",
            "kv_heads",
            "head_dim",
            "block_size",
            "num_blocks",
            "output_tokens",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.requests < 0:
            raise ConfigError("requests", "must be >= 0")
        if self.query_heads % self.kv_heads != 0:
            raise ConfigError("kv_heads", "query_heads must be divisible by kv_heads")
        lo, hi = self.prompt_len
        if lo < 1 or hi < lo:
            raise ConfigError("prompt_len", "need 1 <= lo <= hi")
        if self.rate < 1:
            raise ConfigError("rate", "must be >= 1")
        if self.policy not in POLICY_PRESETS:
            raise ConfigError("policy", f"unknown preset (have {sorted(POLICY_PRESETS)})")
        if self.metric_mode not in ("window", "full"):
            raise ConfigError("metric_mode", "must be 'window' or 'full'")
        if self.aggregation not in ("L1", "L2"):
            raise ConfigError("aggregation", "must be 'L1' or 'L2'")
        if self.window < 1:
            raise ConfigError("window", "must be >= 1")
        if self.pool < 1 or self.pool % 2 == 0:
            raise ConfigError("pool", "must be odd and >= 1")
        if self.excluded_window < 0:
            raise ConfigError("excluded_window", "must be >= 0")

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            num_query_heads=self.query_heads,
            num_kv_heads=self.kv_heads,
            head_dim=self.head_dim,
            num_layers=self.layers,
        )

    def metric_config(self) -> MetricConfig:
        return MetricConfig(
            mode=self.metric_mode,
            aggregation=self.aggregation,
            window=self.window,
            pool=self.pool,
            excluded=self.excluded_window,
        )

    def compression_policy(self) -> CompressionPolicy:
        preset = POLICY_PRESETS[self.policy]
        return CompressionPolicy(
            on_prefill=preset.on_prefill,
            on_preempt=preset.on_preempt,
            every_c=self.compress_every if self.compress_every else preset.every_c,
            token_threshold=self.token_threshold,
            kv_limit=self.kv_limit,
        )

    def to_dict(self) -> dict:
        data = {
            "seed": self.seed,
            "layers": self.layers,
            "query_heads": self.query_heads,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "block_size": self.block_size,
            "num_blocks": self.num_blocks,
            "prompt_len": list(self.prompt_len),
            "requests": self.requests,
            "output_tokens": self.output_tokens,
            "rate": self.rate,
            "max_cache_tokens": self.max_cache_tokens,
            "policy": self.policy,
            "metric_mode": self.metric_mode,
            "aggregation": self.aggregation,
            "window": self.window,
            "pool": self.pool,
            "excluded_window": self.excluded_window,
            "kv_limit": self.kv_limit,
            "compress_every": self.compress_every,
            "token_threshold": self.token_threshold,
            "budget_floor": self.budget_floor,
            "budget_mode": self.budget_mode,
        }
        return data


class SyntheticRequest:
    """One request's deterministic token stream of unit-scale activations.

    Tokens are drawn lazily, in order, from a per-request generator and
    memoized so re-prefill after preemption replays identical values.
    """

    def __init__(
        self,
        request_id: int,
        prompt_len: int,
        output_tokens: int,
        seed_seq: np.random.SeedSequence,
        layers: int,
        query_heads: int,
        kv_heads: int,
        head_dim: int,
    ):
        self.request_id = request_id
        self.prompt_len = prompt_len
        self.output_tokens = output_tokens
        self._rng = np.random.default_rng(seed_seq)
        self._shape = (layers, query_heads, kv_heads, head_dim)
        self._tokens: list[TokenKV] = []

    def token(self, index: int) -> TokenKV:
        layers, n_q, n_k, dim = self._shape
        while len(self._tokens) <= index:
            self._tokens.append(
                TokenKV(
                    q=self._rng.standard_normal((layers, n_q, dim)),
                    k=self._rng.standard_normal((layers, n_k, dim)),
                    v=self._rng.standard_normal((layers, n_k, dim)),
                )
            )
        return self._tokens[index]


def generate_workload(cfg: WorkloadConfig) -> list[SyntheticRequest]:
    """Build the request stream: prompt lengths and token seeds from one root seed."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    length_rng = np.random.default_rng(root.spawn(1)[0])
    token_seeds = root.spawn(cfg.requests + 1)[1:]
    lo, hi = cfg.prompt_len
    requests = []
    for i in range(cfg.requests):
        prompt = int(length_rng.integers(lo, hi + 1))
        requests.append(
            SyntheticRequest(
                request_id=i,
                prompt_len=prompt,
                output_tokens=cfg.output_tokens,
                seed_seq=token_seeds[i],
                layers=cfg.layers,
                query_heads=cfg.query_heads,
                kv_heads=cfg.kv_heads,
                head_dim=cfg.head_dim,
            )
        )
    return requests


@dataclass
class RunReport:
    config: WorkloadConfig
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def max_batch_size(self) -> int:
        return max((r.batch_size for r in self.steps), default=0)

    @property
    def total_steps(self) -> int:
        return len(self.steps)

    @property
    def total_generated(self) -> int:
        return sum(r.batch_size for r in self.steps)

    @property
    def throughput_proxy(self) -> float:
        return self.total_generated / self.total_steps if self.steps else 0.0

    @property
    def peak_fragmentation(self) -> int:
        return max((r.fragmentation for r in self.steps), default=0)

    def summary(self) -> dict:
        return {
            "max_batch_size": self.max_batch_size,
            "total_steps": self.total_steps,
            "total_generated": self.total_generated,
            "throughput_proxy": self.throughput_proxy,
            "peak_fragmentation": self.peak_fragmentation,
            "total_compressions": sum(r.compressions for r in self.steps),
            "total_preemptions": sum(r.preemptions for r in self.steps),
            "total_blocks_freed": sum(r.blocks_freed for r in self.steps),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "summary": self.summary(),
            "steps": [r.to_dict() for r in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def steps_csv(self) -> str:
        lines = [",".join(STEP_CSV_COLUMNS)]
        for r in self.steps:
            lines.append(
                ",".join(
                    str(v)
                    for v in (
                        r.step,
                        r.batch_size,
                        r.free_blocks,
                        r.fragmentation,
                        r.compressions,
                        r.preemptions,
                        r.blocks_freed,
                        r.admitted,
                        r.finished,
                    )
                )
            )
        return "\n".join(lines) + "\n"


def build_engine(cfg: WorkloadConfig, record_schedules: bool = False) -> Engine:
    return Engine(
        attn_cfg=cfg.attention_config(),
        metric_cfg=cfg.metric_config(),
        policy=cfg.compression_policy(),
        num_blocks=cfg.num_blocks,
        block_size=cfg.block_size,
        rate=cfg.rate,
        max_cache_tokens=cfg.max_cache_tokens,
        budget_floor=cfg.budget_floor,
        budget_mode=cfg.budget_mode,
        record_schedules=record_schedules,
    )


def run(cfg: WorkloadConfig, record_schedules: bool = False) -> RunReport:
    """Execute the workload to completion and return the per-step report."""
    requests = generate_workload(cfg)
    for req in requests:
        need = blocks_needed_prefill(
            req.prompt_len, cfg.layers, cfg.kv_heads, cfg.block_size
        )
        if need > cfg.num_blocks:
            raise InfeasibleWorkloadError(
                f"request {req.request_id} needs {need} blocks to prefill "
                f"but num_blocks is {cfg.num_blocks}"
            )
    engine = build_engine(cfg, record_schedules=record_schedules)
    for req in requests:
        engine.submit(req)
    records = engine.run_to_completion(max_steps=cfg.max_steps)
    return RunReport(config=cfg, steps=records)


def sweep(cfg: WorkloadConfig, rates: Sequence[float]) -> str:
    """Run once per compression rate with the same seed; returns the CSV text."""
    if not rates:
        raise ConfigError("rates", "must be non-empty")
    lines = [",".join(SWEEP_CSV_COLUMNS)]
    for rate in rates:
        report = run(replace(cfg, rate=rate))
        summary = report.summary()
        lines.append(
            ",".join(
                str(v)
                for v in (
                    _format_rate(rate),
                    summary["max_batch_size"],
                    summary["total_steps"],
                    summary["throughput_proxy"],
                    summary["peak_fragmentation"],
                )
            )
        )
    return "\n".join(lines) + "\n"


def _format_rate(rate: float) -> str:
    return str(int(rate)) if float(rate).is_integer() else str(rate)
