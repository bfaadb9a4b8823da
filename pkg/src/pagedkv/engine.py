"""Deterministic scheduling loop: prefill admission, decode, compression, preemption.

One ``step`` admits waiting prompts while they fit, runs compression rounds
according to the configured policy, allocates decode blocks (compressing
and then preempting when the pool runs dry), decodes one token per running
sequence with synthetic Q/K/V, folds the decode attention into the metrics,
and retires finished sequences.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .attention import AttentionConfig, gqa_attention, paged_attention
from .block_manager import BlockManager, blocks_needed_prefill, preempt_select
from .cache import BlockTables, UnifiedKVCache, append_kv, fragmentation
from .compression import compress
from .errors import InfeasibleWorkloadError, PreemptionNeeded
from .metrics import MetricConfig, MetricsStore, accumulate_decode, prompt_metrics

WAITING = "waiting"
RUNNING = "running"
PREEMPTED = "preempted"
FINISHED = "finished"


class TokenSource(Protocol):
    """Supplies per-token Q/K/V activations for one request."""

    prompt_len: int
    output_tokens: int

    def token(self, index: int) -> "TokenKV": ...


@dataclass(frozen=True)
class TokenKV:
    """Synthetic activations for one token: per-layer Q, K, V."""

    q: np.ndarray  # (layers, num_query_heads, head_dim)
    k: np.ndarray  # (layers, num_kv_heads, head_dim)
    v: np.ndarray  # (layers, num_kv_heads, head_dim)


@dataclass
class SequenceState:
    seq_id: int
    source: TokenSource
    prompt_len: int
    max_output_tokens: int
    budget_tokens: int | None  # None: never evict
    generated: int = 0
    status: str = WAITING
    admission_index: int = -1
    last_compressed_at: int | None = None
    uncompressed_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        """Tokens a (re-)prefill must process: prompt plus everything decoded."""
        return self.prompt_len + self.generated

    @property
    def done(self) -> bool:
        return self.generated >= self.max_output_tokens


@dataclass(frozen=True)
class CompressionPolicy:
    """When compression rounds run and how large a round may get.

    ``kv_limit`` caps the total live KVs a single round may touch; set it to
    at least max_model_len * layers * kv_heads to guarantee every sequence is
    eventually compressed.
    """

    on_prefill: bool = True
    on_preempt: bool = True
    every_c: int | None = None
    token_threshold: int | None = None
    kv_limit: int | None = None


POLICY_PRESETS = {
    "prefill-preempt": CompressionPolicy(on_prefill=True, on_preempt=True),
    "every-step": CompressionPolicy(on_prefill=True, on_preempt=True, every_c=1),
    "none": CompressionPolicy(on_prefill=False, on_preempt=False),
}


def per_sequence_budget(
    prompt_len: int,
    rate: float,
    floor_tokens: int = 128,
    mode: str = "min",
) -> int:
    """Target cache tokens for a sequence compressed at ``rate``.

    Default combines the floor and prompt_len/rate with min(); mode="max"
    selects the floor reading instead. rate == 1 returns prompt_len so no
    eviction ever triggers.
    """
    if rate < 1:
        raise ValueError("rate must be >= 1")
    if rate == 1:
        return prompt_len
    combine = min if mode == "min" else max
    return int(math.floor(combine(float(floor_tokens), prompt_len / rate)))


def budget_to_blocks(
    budget_tokens: int,
    num_layers: int,
    num_kv_heads: int,
    block_size: int,
    allocated_blocks: int,
) -> int:
    """Blocks to evict so the kept KVs fit the token budget.

    The target kept-KV count is budget_tokens * layers * kv_heads; eviction
    budget is whatever the current allocation exceeds it by, in blocks.
    """
    target_kvs = budget_tokens * num_layers * num_kv_heads
    return max(0, allocated_blocks - (-(-target_kvs // block_size)))


def select_compression_batch(
    running: Sequence[SequenceState],
    kv_limit: int | None,
    kv_counts: Mapping[int, int],
) -> list[SequenceState]:
    """Pick the sequences one compression round will touch.

    Scan order is staleness: never-compressed first, then oldest
    last_compressed_at, ties by admission. The scan stops at the first
    sequence that would push the batch's total live KVs over kv_limit.
    """

    def staleness(seq: SequenceState):
        never = seq.last_compressed_at is None
        return (0 if never else 1, seq.last_compressed_at or 0, seq.admission_index)

    batch: list[SequenceState] = []
    total = 0
    for seq in sorted(running, key=staleness):
        count = kv_counts[seq.seq_id]
        if kv_limit is not None and total + count > kv_limit:
            break
        batch.append(seq)
        total += count
    return batch


@dataclass
class StepRecord:
    step: int
    admitted: int = 0
    batch_size: int = 0
    compressions: int = 0
    blocks_freed: int = 0
    kvs_evicted: int = 0
    preemptions: int = 0
    finished: int = 0
    free_blocks: int = 0
    fragmentation: int = 0
    schedules: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        record = {
            "step": self.step,
            "admitted": self.admitted,
            "batch_size": self.batch_size,
            "compressions": self.compressions,
            "blocks_freed": self.blocks_freed,
            "kvs_evicted": self.kvs_evicted,
            "preemptions": self.preemptions,
            "finished": self.finished,
            "free_blocks": self.free_blocks,
            "fragmentation": self.fragmentation,
        }
        if self.schedules:
            record["schedules"] = self.schedules
        return record


class Engine:
    """Single-threaded deterministic state machine over the paged cache."""

    def __init__(
        self,
        attn_cfg: AttentionConfig,
        metric_cfg: MetricConfig,
        policy: CompressionPolicy,
        num_blocks: int,
        block_size: int,
        rate: float = 1.0,
        max_cache_tokens: int | None = None,
        budget_floor: int = 128,
        budget_mode: str = "min",
        record_schedules: bool = False,
    ):
        self.attn_cfg = attn_cfg
        self.metric_cfg = metric_cfg
        self.policy = policy
        self.rate = rate
        self.max_cache_tokens = max_cache_tokens
        self.budget_floor = budget_floor
        self.budget_mode = budget_mode
        self.record_schedules = record_schedules

        self.cache = UnifiedKVCache(num_blocks, block_size, attn_cfg.head_dim)
        self.tables = BlockTables(attn_cfg.num_layers, attn_cfg.num_kv_heads, block_size)
        self.manager = BlockManager(num_blocks, self.tables)
        self.store = MetricsStore(num_blocks, block_size)

        self.waiting: deque[SequenceState] = deque()
        self.running: list[SequenceState] = []
        self.finished: list[SequenceState] = []
        self.step_index = 0
        self._admissions = 0
        self._next_seq_id = 0

    # -- configuration-derived state -------------------------------------------

    @property
    def compression_active(self) -> bool:
        # rate 1 with no explicit cap behaves exactly like compression disabled
        return self.max_cache_tokens is not None or self.rate > 1

    def _budget_for(self, prompt_len: int) -> int | None:
        if self.max_cache_tokens is not None:
            return self.max_cache_tokens
        if self.rate <= 1:
            return None
        return per_sequence_budget(
            prompt_len, self.rate, self.budget_floor, self.budget_mode
        )

    # -- workload intake --------------------------------------------------------

    def submit(self, source: TokenSource) -> SequenceState:
        state = SequenceState(
            seq_id=self._next_seq_id,
            source=source,
            prompt_len=source.prompt_len,
            max_output_tokens=source.output_tokens,
            budget_tokens=self._budget_for(source.prompt_len),
        )
        self._next_seq_id += 1
        self.waiting.append(state)
        return state

    @property
    def active(self) -> bool:
        return bool(self.waiting or self.running)

    # -- the scheduling loop ------------------------------------------------------

    def step(self) -> StepRecord:
        self.step_index += 1
        rec = StepRecord(step=self.step_index)

        admission_blocked = self._admit(rec)
        if admission_blocked and self.policy.on_preempt and self.compression_active:
            # free room so the blocked prompt can be admitted without preempting
            self._compression_round(rec)
            self._admit(rec)
        if rec.admitted and self.policy.on_prefill and self.compression_active:
            self._compression_round(rec)
        if (
            self.policy.every_c
            and self.compression_active
            and self.step_index % self.policy.every_c == 0
        ):
            self._compression_round(rec)
        if (
            self.policy.token_threshold is not None
            and self.compression_active
            and sum(s.uncompressed_tokens for s in self.running)
            >= self.policy.token_threshold
        ):
            self._compression_round(rec)

        self._allocate_decode(rec)

        for state in list(self.running):
            self._decode_one(state)
            rec.batch_size += 1
            if state.done:
                self._retire(state)
                rec.finished += 1

        self.store.clear_fresh()
        rec.free_blocks = self.manager.free_count
        rec.fragmentation = fragmentation(self.tables)
        return rec

    def run_to_completion(self, max_steps: int = 1_000_000) -> list[StepRecord]:
        records = []
        while self.active:
            if self.step_index >= max_steps:
                raise RuntimeError(f"workload did not finish within {max_steps} steps")
            records.append(self.step())
        return records

    # -- step phases -------------------------------------------------------------

    def _admit(self, rec: StepRecord) -> bool:
        """FIFO admission; returns True when the head prompt did not fit."""
        while self.waiting:
            state = self.waiting[0]
            need = blocks_needed_prefill(
                state.total_tokens,
                self.attn_cfg.num_layers,
                self.attn_cfg.num_kv_heads,
                self.tables.block_size,
            )
            if need > self.manager.num_blocks:
                raise InfeasibleWorkloadError(
                    f"sequence {state.seq_id} needs {need} blocks to prefill "
                    f"but the cache only has {self.manager.num_blocks}"
                )
            if need > self.manager.free_count:
                return True
            self.waiting.popleft()
            self._prefill(state)
            rec.admitted += 1
        return False

    def _prefill(self, state: SequenceState) -> None:
        cfg = self.attn_cfg
        length = state.total_tokens
        self.manager.allocate_prefill(state.seq_id, length)
        tokens = [state.source.token(i) for i in range(length)]
        for layer in range(cfg.num_layers):
            q = np.stack([t.q[layer] for t in tokens], axis=1)  # (n_q, L, d)
            k = np.stack([t.k[layer] for t in tokens], axis=1)  # (n_k, L, d)
            v = np.stack([t.v[layer] for t in tokens], axis=1)
            for head in range(cfg.num_kv_heads):
                flats = self.tables.head_slots_flat(state.seq_id, layer, head)[:length]
                self.cache.keys_flat[flats] = k[head]
                self.cache.values_flat[flats] = v[head]
                self.tables.set_context_len(state.seq_id, layer, head, length)
            _, attn = gqa_attention(q, k, v, cfg)
            metrics, protected = prompt_metrics(attn, self.metric_cfg, cfg.num_kv_heads)
            self.store.write_prompt_pass(
                self.tables, state.seq_id, layer, metrics, protected
            )
        state.status = RUNNING
        state.admission_index = self._admissions
        self._admissions += 1
        state.uncompressed_tokens = length
        self.running.append(state)

    def _compression_round(self, rec: StepRecord) -> None:
        kv_counts = {
            s.seq_id: self.tables.allocated_kv_count(s.seq_id) for s in self.running
        }
        batch = select_compression_batch(self.running, self.policy.kv_limit, kv_counts)
        budgets: dict[int, int] = {}
        cfg = self.attn_cfg
        for state in batch:
            if state.budget_tokens is None:
                budgets[state.seq_id] = 0
                continue
            budgets[state.seq_id] = budget_to_blocks(
                state.budget_tokens,
                cfg.num_layers,
                cfg.num_kv_heads,
                self.tables.block_size,
                self.tables.sequence_block_count(state.seq_id),
            )
        schedule = compress(self.cache, self.tables, self.manager, self.store, budgets)
        for state in batch:
            state.last_compressed_at = self.step_index
            state.uncompressed_tokens = 0
        rec.compressions += 1
        rec.blocks_freed += schedule.freed_count
        rec.kvs_evicted += schedule.evicted_kvs
        if self.record_schedules:
            rec.schedules.append(schedule.to_dict())

    def _allocate_decode(self, rec: StepRecord) -> None:
        tried_compression = False
        while True:
            try:
                self.manager.allocate_decode_step([s.seq_id for s in self.running])
                return
            except PreemptionNeeded:
                if (
                    self.policy.on_preempt
                    and self.compression_active
                    and not tried_compression
                ):
                    tried_compression = True
                    self._compression_round(rec)
                    continue
                if len(self.running) <= 1:
                    raise InfeasibleWorkloadError(
                        "a lone running sequence cannot allocate decode blocks; "
                        "the workload cannot make progress"
                    )
                victim_id = preempt_select(self.running)
                self._preempt(victim_id)
                rec.preemptions += 1

    def _preempt(self, seq_id: int) -> None:
        state = next(s for s in self.running if s.seq_id == seq_id)
        freed = self.manager.free_sequence(seq_id)
        self.store.clear_blocks(freed)
        self.running.remove(state)
        state.status = PREEMPTED
        state.last_compressed_at = None
        state.uncompressed_tokens = 0
        # recomputation: the sequence re-prefills prompt + generated tokens
        self.waiting.appendleft(state)

    def _decode_one(self, state: SequenceState) -> None:
        cfg = self.attn_cfg
        token = state.source.token(state.total_tokens)
        for layer in range(cfg.num_layers):
            for head in range(cfg.num_kv_heads):
                ctx = self.tables.context_len(state.seq_id, layer, head)
                handle = append_kv(
                    self.tables,
                    self.cache,
                    state.seq_id,
                    layer,
                    head,
                    token.k[layer, head],
                    token.v[layer, head],
                )
                self.store.on_append(handle, logical=ctx, fresh=True)
            _, rows = paged_attention(
                token.q[layer], self.cache, self.tables, state.seq_id, layer, cfg
            )
            accumulate_decode(
                self.store, self.tables, state.seq_id, layer, rows, self.metric_cfg
            )
        state.generated += 1
        state.uncompressed_tokens += 1

    def _retire(self, state: SequenceState) -> None:
        freed = self.manager.free_sequence(state.seq_id)
        self.store.clear_blocks(freed)
        self.running.remove(state)
        state.status = FINISHED
        self.finished.append(state)
