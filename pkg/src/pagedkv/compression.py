"""Block-granular eviction scheduling and cache compaction.

Turning per-slot metrics into freed blocks runs as a pipeline, per sequence:

 1. lay out every allocated slot grouped by head, in table order (M1);
 2. sort each head's slots by metric — empty slots count as metric 0 and
    sort first, protected slots count as +inf and sort last (M2);
 3. reshape each head's sorted run into rows of ``block_size``: row e-1 holds
    the e-th batch of lowest metrics, so its last entry is the largest metric
    evicted when freeing e blocks from that head (M3 / the threshold table);
 4. rank all rows of the sequence by that last-entry value (M4);
 5. mark the first E eligible rows — a head's final row, and rows holding
    protected slots, are never eligible (M5..M7 eviction mask);
 6. compact each head with a two-cursor walk so the marked slots end up in
    the head's trailing blocks (MoveCache);
 7. free those trailing blocks and renumber the surviving logical indices.

Marking whole sorted rows means each freed block absorbs the head's empty
slots first, so every evicted block costs exactly the head's lowest live
metrics and the survivor blocks come out fully packed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .block_manager import BlockManager
from .cache import BlockTables, UnifiedKVCache
from .errors import BudgetError, ScheduleCorruptionError
from .metrics import MetricsStore


@dataclass
class HeadView:
    """One head's slots in M1 layout (table order), plus its sort inputs."""

    layer: int
    head: int
    blocks: list[int]
    flats: np.ndarray  # physical slot ids, one per allocated slot
    context_len: int
    occupied: np.ndarray  # bool per slot: position < context_len
    metrics: np.ndarray  # effective metric: 0 for empty, +inf for shielded
    logical: np.ndarray
    cap: int  # max evictable blocks for this head

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class HeadEviction:
    layer: int
    head: int
    evicted_blocks: int
    evicted_kvs: int
    moves: list[tuple[int, int]]  # (src_flat, dst_flat)
    freed: list[int]


@dataclass
class SequenceSchedule:
    seq_id: int
    requested_budget: int
    budget: int  # after clamping
    heads: list[HeadEviction] = field(default_factory=list)

    @property
    def freed_blocks(self) -> list[int]:
        return [b for h in self.heads for b in h.freed]

    @property
    def evicted_kvs(self) -> int:
        return sum(h.evicted_kvs for h in self.heads)


@dataclass
class CompressionSchedule:
    """Outcome of one compression round, serializable for report streams."""

    sequences: list[SequenceSchedule] = field(default_factory=list)

    @property
    def freed_count(self) -> int:
        return sum(len(s.freed_blocks) for s in self.sequences)

    @property
    def evicted_kvs(self) -> int:
        return sum(s.evicted_kvs for s in self.sequences)

    def to_dict(self) -> dict:
        return {
            "freed_blocks": self.freed_count,
            "evicted_kvs": self.evicted_kvs,
            "sequences": [
                {
                    "seq_id": s.seq_id,
                    "requested_budget": s.requested_budget,
                    "budget": s.budget,
                    "heads": [
                        {
                            "layer": h.layer,
                            "head": h.head,
                            "evicted_blocks": h.evicted_blocks,
                            "evicted_kvs": h.evicted_kvs,
                            "freed": list(h.freed),
                            "moves": [list(m) for m in h.moves],
                        }
                        for h in s.heads
                        if h.evicted_blocks
                    ],
                }
                for s in self.sequences
            ],
        }


def build_views(tables: BlockTables, store: MetricsStore, seq_id: int) -> list[HeadView]:
    """Snapshot every head of a sequence in M1 layout."""
    b = tables.block_size
    views = []
    for layer, head in tables.heads(seq_id):
        blocks = list(tables.blocks(seq_id, layer, head))
        flats = tables.head_slots_flat(seq_id, layer, head)
        ctx = tables.context_len(seq_id, layer, head)
        occupied = np.arange(len(flats)) < ctx
        shielded = (store.protected_flat[flats] | store.fresh_flat[flats]) & occupied
        metrics = np.where(occupied, store.metrics_flat[flats], 0.0)
        metrics = np.where(shielded, np.inf, metrics)
        shield_count = int(shielded.sum())
        cap = max(0, len(blocks) - max(1, -(-shield_count // b)))
        views.append(
            HeadView(
                layer=layer,
                head=head,
                blocks=blocks,
                flats=flats,
                context_len=ctx,
                occupied=occupied,
                metrics=metrics,
                logical=store.logical_flat[flats].copy(),
                cap=cap,
            )
        )
    return views


def max_evictable_blocks(views: list[HeadView]) -> int:
    return sum(v.cap for v in views)


def sort_by_head_metric(view: HeadView) -> np.ndarray:
    """Permutation sorting a head's slots by metric (M1 -> M2).

    Empty slots sort first (metric 0 beats any tie via the occupancy key);
    occupied ties break by ascending logical index, empty ties by position.
    """
    positions = np.arange(len(view.flats))
    logical_key = np.where(view.occupied, view.logical, -1)
    return np.lexsort(
        (positions, logical_key, view.occupied.astype(np.int8), view.metrics)
    )


def eviction_thresholds(view: HeadView, perm: np.ndarray, block_size: int) -> np.ndarray:
    """Largest metric evicted when freeing e blocks, for e = 1..num_blocks.

    Reshaping the sorted metrics into rows of ``block_size`` (M3), entry e-1
    is the last element of row e-1: the (b*e)-th smallest metric of the head,
    empty slots included as zeros.
    """
    sorted_metrics = view.metrics[perm]
    return sorted_metrics.reshape(view.num_blocks, block_size)[:, -1]


def order_candidate_blocks(
    thresholds: list[np.ndarray],
) -> list[tuple[float, int, int]]:
    """Rank all candidate block evictions of a sequence (M3 -> M4).

    Returns (threshold, head index, row index) tuples sorted ascending by
    threshold, ties broken by head then row, preserving block contiguity.
    """
    rows = [
        (float(th), head_idx, row_idx)
        for head_idx, head_thresholds in enumerate(thresholds)
        for row_idx, th in enumerate(head_thresholds)
    ]
    rows.sort()
    return rows


def eviction_mask(
    order: list[tuple[float, int, int]],
    budget: int,
    views: list[HeadView],
    perms: list[np.ndarray],
    block_size: int,
) -> tuple[list[int], list[np.ndarray]]:
    """Mark the slots of the first ``budget`` eligible candidate rows.

    A row is eligible while its index stays below its head's cap, which keeps
    at least one block per head and never marks a protected slot. Returns
    per-head evicted-block counts and boolean masks in M1 layout (W7).
    Raises BudgetError when the budget exceeds the eligible rows.
    """
    if budget > max_evictable_blocks(views):
        raise BudgetError(
            f"budget {budget} exceeds {max_evictable_blocks(views)} evictable blocks"
        )
    evictions = [0] * len(views)
    marked = 0
    for _, head_idx, row_idx in order:
        if marked == budget:
            break
        if row_idx >= views[head_idx].cap:
            continue
        # rows of one head are always marked lowest-first
        assert row_idx == evictions[head_idx]
        evictions[head_idx] += 1
        marked += 1
    masks = []
    for view, perm, count in zip(views, perms, evictions):
        mask = np.zeros(len(view.flats), dtype=bool)
        mask[perm[: count * block_size]] = True
        masks.append(mask)
    return evictions, masks


def move_cache(
    cache: UnifiedKVCache,
    store: MetricsStore,
    flats: np.ndarray,
    mask: np.ndarray,
    evicted_blocks: int,
    block_size: int,
) -> list[tuple[int, int]]:
    """Two-cursor compaction of one head (the MoveCache walk).

    The eviction range spans the head's last ``evicted_blocks * block_size``
    slots. Walking the range backwards, every surviving KV found inside it
    moves into the lowest unconsumed hole (marked or empty slot) outside the
    range; key, value, metric, logical index and flags travel together.
    Raises ScheduleCorruptionError when the holes outside the range run out.
    """
    total = len(flats)
    span = evicted_blocks * block_size
    if span == 0:
        return []
    if span > total:
        raise ScheduleCorruptionError("eviction range exceeds the head's slots")
    end = total - span - 1  # last position outside the range
    occupied = store.logical_flat[flats] >= 0
    hole = mask | ~occupied
    moves: list[tuple[int, int]] = []
    i = 0
    for j in range(total - 1, end, -1):
        if hole[j]:
            continue
        while i <= end and not hole[i]:
            i += 1
        if i > end:
            raise ScheduleCorruptionError(
                "surviving KV in the eviction range but no hole left outside it"
            )
        src, dst = int(flats[j]), int(flats[i])
        cache.keys_flat[dst] = cache.keys_flat[src]
        cache.values_flat[dst] = cache.values_flat[src]
        store.metrics_flat[dst] = store.metrics_flat[src]
        store.logical_flat[dst] = store.logical_flat[src]
        store.protected_flat[dst] = store.protected_flat[src]
        store.fresh_flat[dst] = store.fresh_flat[src]
        hole[i] = False
        i += 1
        moves.append((src, dst))
    return moves


def free_schedule_blocks(
    seq_schedule: SequenceSchedule,
    tables: BlockTables,
    manager: BlockManager,
    store: MetricsStore,
    seq_id: int,
) -> int:
    """Free each head's trailing evicted blocks and renumber survivors.

    Context lengths drop to the kept counts and the surviving logical
    indices are re-ranked to 0..C'-1 preserving their relative order.
    """
    freed_total = 0
    for head_ev in seq_schedule.heads:
        if not head_ev.evicted_blocks:
            continue
        manager.free_blocks(head_ev.freed)
        store.clear_blocks(head_ev.freed)
        freed_total += len(head_ev.freed)
        ctx = tables.context_len(seq_id, head_ev.layer, head_ev.head)
        flats = tables.head_slots_flat(seq_id, head_ev.layer, head_ev.head)[:ctx]
        logical = store.logical_flat[flats]
        order = np.argsort(logical, kind="stable")
        ranks = np.empty(ctx, dtype=np.int64)
        ranks[order] = np.arange(ctx)
        store.logical_flat[flats] = ranks
    return freed_total


def compress(
    cache: UnifiedKVCache,
    tables: BlockTables,
    manager: BlockManager,
    store: MetricsStore,
    budgets: Mapping[int, int],
) -> CompressionSchedule:
    """Run the full eviction pipeline for a batch of per-sequence budgets.

    Budgets are clamped to each sequence's evictable blocks (every head keeps
    at least one block and all its protected slots). Sequences are processed
    independently, in batch order.
    """
    schedule = CompressionSchedule()
    b = tables.block_size
    for seq_id, requested in budgets.items():
        views = build_views(tables, store, seq_id)
        budget = min(requested, max_evictable_blocks(views))
        seq_schedule = SequenceSchedule(
            seq_id=seq_id, requested_budget=requested, budget=budget
        )
        schedule.sequences.append(seq_schedule)
        if budget <= 0:
            continue
        perms = [sort_by_head_metric(v) for v in views]
        thresholds = [eviction_thresholds(v, p, b) for v, p in zip(views, perms)]
        order = order_candidate_blocks(thresholds)
        evictions, masks = eviction_mask(order, budget, views, perms, b)
        for view, mask, count in zip(views, masks, evictions):
            if count == 0:
                continue
            moves = move_cache(cache, store, view.flats, mask, count, b)
            seq_schedule.heads.append(
                HeadEviction(
                    layer=view.layer,
                    head=view.head,
                    evicted_blocks=count,
                    evicted_kvs=int((mask & view.occupied).sum()),
                    moves=moves,
                    freed=view.blocks[view.num_blocks - count :],
                )
            )
        free_schedule_blocks(seq_schedule, tables, manager, store, seq_id)
    return schedule
