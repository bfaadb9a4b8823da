"""Per-KV eviction metrics: windowed/full aggregation, pooling, decode accumulation.

A KV's metric aggregates the attention its key received from a range of
queries, summed over the query heads of its group (L1) or summed after
squaring (L2). Lower metric means evicted sooner. The store keeps one
metric per physical slot, aligned with the cache layout, together with the
slot's logical index and protection flags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import BlockTables, SlotHandle

FULL = "full"
WINDOW = "window"
L1 = "L1"
L2 = "L2"


@dataclass(frozen=True)
class MetricConfig:
    mode: str = WINDOW
    aggregation: str = L2
    window: int = 8  # observation window (tokens), window mode
    pool: int = 7  # max-pooling width, odd
    excluded: int = 10  # excluded query window (tokens), full mode
    protect_window: bool = True  # shield observation-window keys from eviction

    def __post_init__(self):
        if self.mode not in (FULL, WINDOW):
            raise ValueError(f"mode must be '{FULL}' or '{WINDOW}'")
        if self.aggregation not in (L1, L2):
            raise ValueError(f"aggregation must be '{L1}' or '{L2}'")
        if self.mode == WINDOW and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.pool < 1 or self.pool % 2 == 0:
            raise ValueError("pool must be odd and >= 1")
        if self.excluded < 0:
            raise ValueError("excluded must be >= 0")


def apply_aggregation(values: np.ndarray, aggregation: str) -> np.ndarray:
    return values * values if aggregation == L2 else values


def _group_sum(per_query_head: np.ndarray, num_kv_heads: int) -> np.ndarray:
    """Sum per-query-head metrics over each KV head's query group."""
    n_q = per_query_head.shape[0]
    r = n_q // num_kv_heads
    return per_query_head.reshape(num_kv_heads, r, *per_query_head.shape[1:]).sum(axis=1)


def _pool_max(metrics: np.ndarray, pool: int) -> np.ndarray:
    """Centered max-pool of width ``pool`` along the last axis, truncated at edges."""
    if pool == 1:
        return metrics.copy()
    out = metrics.copy()
    for off in range(1, pool // 2 + 1):
        out[..., off:] = np.maximum(out[..., off:], metrics[..., :-off])
        out[..., :-off] = np.maximum(out[..., :-off], metrics[..., off:])
    return out


def window_metrics(
    attn: np.ndarray, cfg: MetricConfig, num_kv_heads: int
) -> tuple[np.ndarray, np.ndarray]:
    """Observation-window metrics from an (n_q, L, L) causal attention matrix.

    Aggregates attention from the last ``cfg.window`` prompt queries for each
    key, sums over the key's query group, then max-pools over the key axis.
    Returns (metrics of shape (num_kv_heads, L), protected mask of shape (L,))
    where keys inside the observation window are flagged protected.
    """
    n_q, length, _ = attn.shape
    if n_q % num_kv_heads != 0:
        raise ValueError("query head count not divisible by num_kv_heads")
    start = max(length - cfg.window, 0)
    contrib = apply_aggregation(attn[:, start:, :], cfg.aggregation)
    per_query_head = contrib.sum(axis=1)  # (n_q, L)
    grouped = _group_sum(per_query_head, num_kv_heads)
    pooled = _pool_max(grouped, cfg.pool)
    protected = np.arange(length) >= start
    if not cfg.protect_window:
        protected = np.zeros(length, dtype=bool)
    return pooled, protected


def full_metrics(attn: np.ndarray, cfg: MetricConfig, num_kv_heads: int) -> np.ndarray:
    """Full-range metrics: for key j, aggregate queries i in [j + excluded, L).

    No pooling, no protection. With excluded=0 and L1 aggregation this
    reduces to the column sums of the causal attention matrix.
    """
    n_q, length, _ = attn.shape
    if n_q % num_kv_heads != 0:
        raise ValueError("query head count not divisible by num_kv_heads")
    contrib = apply_aggregation(attn, cfg.aggregation)
    # suffix[i, j] = sum over queries i' >= i of contrib[:, i', j]
    suffix = np.cumsum(contrib[:, ::-1, :], axis=1)[:, ::-1, :]
    per_query_head = np.zeros((n_q, length))
    for j in range(length):
        i0 = j + cfg.excluded
        if i0 < length:
            per_query_head[:, j] = suffix[:, i0, j]
    return _group_sum(per_query_head, num_kv_heads)


def prompt_metrics(
    attn: np.ndarray, cfg: MetricConfig, num_kv_heads: int
) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch on cfg.mode; returns (metrics, protected mask over keys)."""
    if cfg.mode == WINDOW:
        return window_metrics(attn, cfg, num_kv_heads)
    metrics = full_metrics(attn, cfg, num_kv_heads)
    return metrics, np.zeros(attn.shape[1], dtype=bool)


class MetricsStore:
    """Per-slot eviction state, layout-aligned with the unified cache.

    ``metrics`` holds the accumulated score, ``logical`` the slot's logical
    index (-1 while empty), ``protected`` the observation-window shield and
    ``fresh`` the created-this-step shield. Empty slots always carry metric 0.
    """

    def __init__(self, num_blocks: int, block_size: int):
        self.block_size = block_size
        self.metrics = np.zeros((num_blocks, block_size))
        self.logical = np.full((num_blocks, block_size), -1, dtype=np.int64)
        self.protected = np.zeros((num_blocks, block_size), dtype=bool)
        self.fresh = np.zeros((num_blocks, block_size), dtype=bool)

    @property
    def metrics_flat(self) -> np.ndarray:
        return self.metrics.reshape(-1)

    @property
    def logical_flat(self) -> np.ndarray:
        return self.logical.reshape(-1)

    @property
    def protected_flat(self) -> np.ndarray:
        return self.protected.reshape(-1)

    @property
    def fresh_flat(self) -> np.ndarray:
        return self.fresh.reshape(-1)

    def on_append(self, handle: SlotHandle, logical: int, fresh: bool = False) -> None:
        """Initialize the slot of a freshly appended KV (metric 0)."""
        self.metrics[handle.block, handle.offset] = 0.0
        self.logical[handle.block, handle.offset] = logical
        self.protected[handle.block, handle.offset] = False
        self.fresh[handle.block, handle.offset] = fresh

    def write_prompt_pass(
        self,
        tables: BlockTables,
        seq_id: int,
        layer: int,
        metrics: np.ndarray,
        protected: np.ndarray,
    ) -> None:
        """Install prefill metrics for every head of one layer."""
        for head in range(tables.num_kv_heads):
            ctx = tables.context_len(seq_id, layer, head)
            flats = tables.head_slots_flat(seq_id, layer, head)[:ctx]
            self.metrics_flat[flats] = metrics[head, :ctx]
            self.logical_flat[flats] = np.arange(ctx)
            self.protected_flat[flats] = protected[:ctx]
            self.fresh_flat[flats] = False

    def clear_blocks(self, blocks) -> None:
        """Reset freed blocks to the empty-slot state."""
        blocks = list(blocks)
        self.metrics[blocks] = 0.0
        self.logical[blocks] = -1
        self.protected[blocks] = False
        self.fresh[blocks] = False

    def clear_fresh(self) -> None:
        self.fresh[:] = False


def accumulate_decode(
    store: MetricsStore,
    tables: BlockTables,
    seq_id: int,
    layer: int,
    rows: list[np.ndarray],
    cfg: MetricConfig,
) -> None:
    """Fold one decode step's attention into the live metrics of a layer.

    ``rows[k]`` holds the (group_size, C_k) attention weights of KV head k's
    query group over its live keys, in slot order — the arrays returned by
    paged_attention. Each key j gains sum over its group of f(A[h, j]).
    """
    for head, row in enumerate(rows):
        ctx = tables.context_len(seq_id, layer, head)
        if row.shape[-1] != ctx:
            raise ValueError(
                f"attention row covers {row.shape[-1]} keys but head {head} "
                f"has {ctx} live KVs"
            )
        flats = tables.head_slots_flat(seq_id, layer, head)[:ctx]
        store.metrics_flat[flats] += apply_aggregation(row, cfg.aggregation).sum(axis=0)
