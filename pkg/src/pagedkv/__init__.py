"""Paged KV cache with per-head block tables, block-granular eviction and compaction."""

from .attention import AttentionConfig, dense_attention, gqa_attention, paged_attention
from .block_manager import BlockManager, blocks_needed_prefill, preempt_select
from .cache import (
    BlockTables,
    SlotHandle,
    UnifiedKVCache,
    append_kv,
    fragmentation,
    lookup_kv,
)
from .compression import CompressionSchedule, compress
from .engine import (
    CompressionPolicy,
    Engine,
    SequenceState,
    budget_to_blocks,
    per_sequence_budget,
    select_compression_batch,
)
from .metrics import (
    MetricConfig,
    MetricsStore,
    accumulate_decode,
    full_metrics,
    window_metrics,
)
from .workload import RunReport, WorkloadConfig, generate_workload, run, sweep

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BlockManager",
    "BlockTables",
    "CompressionPolicy",
    "CompressionSchedule",
    "Engine",
    "MetricConfig",
    "MetricsStore",
    "RunReport",
    "SequenceState",
    "SlotHandle",
    "UnifiedKVCache",
    "WorkloadConfig",
    "accumulate_decode",
    "append_kv",
    "blocks_needed_prefill",
    "budget_to_blocks",
    "compress",
    "dense_attention",
    "fragmentation",
    "full_metrics",
    "generate_workload",
    "gqa_attention",
    "lookup_kv",
    "paged_attention",
    "per_sequence_budget",
    "preempt_select",
    "run",
    "select_compression_batch",
    "sweep",
    "window_metrics",
]
