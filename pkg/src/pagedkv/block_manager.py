"""Block allocation, freeing and preemption-victim selection.

Allocation is all-or-nothing per request: prefill either receives every
block it needs or raises :class:`PreemptionNeeded`, and a decode step
computes its full demand from the context lengths before touching the
free pool, so batch results are independent of iteration order.
New blocks are always handed out in ascending numeric order.
"""

from __future__ import annotations

import heapq
from typing import Iterable, Sequence

from .cache import BlockTables
from .errors import BlockOwnershipError, NoVictimError, PreemptionNeeded


def blocks_needed_prefill(
    token_count: int, num_layers: int, num_kv_heads: int, block_size: int
) -> int:
    """Blocks a fresh prefill of ``token_count`` tokens allocates: l*H*ceil(L/b)."""
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    return num_layers * num_kv_heads * -(-token_count // block_size)


class BlockManager:
    """Tracks the free pool and hands blocks to/from the block tables."""

    def __init__(self, num_blocks: int, tables: BlockTables):
        self.num_blocks = num_blocks
        self.tables = tables
        self._free_heap = list(range(num_blocks))
        self._free_set = set(self._free_heap)
        # block -> (seq, layer, head); absent while free
        self._owner: dict[int, tuple[int, int, int]] = {}

    @property
    def free_count(self) -> int:
        return len(self._free_set)

    @property
    def allocated_count(self) -> int:
        return self.num_blocks - len(self._free_set)

    def _take(self, seq_id: int, layer: int, head: int) -> int:
        block = heapq.heappop(self._free_heap)
        self._free_set.remove(block)
        self._owner[block] = (seq_id, layer, head)
        self.tables.blocks(seq_id, layer, head).append(block)
        return block

    # -- allocation -----------------------------------------------------------

    def allocate_prefill(self, seq_id: int, token_count: int) -> int:
        """Allocate ceil(L/b) blocks for every head of a new sequence.

        Raises PreemptionNeeded (allocating nothing) when the pool is short.
        """
        if self.tables.has_sequence(seq_id):
            raise ValueError(f"sequence {seq_id} already allocated")
        t = self.tables
        per_head = -(-token_count // t.block_size)
        demand = per_head * t.num_layers * t.num_kv_heads
        if demand > self.free_count:
            raise PreemptionNeeded(demand - self.free_count)
        t.add_sequence(seq_id)
        for layer, head in t.heads(seq_id):
            for _ in range(per_head):
                self._take(seq_id, layer, head)
        return demand

    def allocate_decode_step(self, seq_ids: Sequence[int]) -> dict[int, int]:
        """Allocate one block for every head whose next position opens a block.

        Demand is a pure function of the context lengths, so any permutation
        of ``seq_ids`` yields the same per-sequence counts. Raises
        PreemptionNeeded naming the shortfall without allocating anything.
        """
        b = self.tables.block_size
        needs: dict[int, list[tuple[int, int]]] = {}
        demand = 0
        for seq_id in seq_ids:
            heads = [
                (layer, head)
                for layer, head in self.tables.heads(seq_id)
                if self.tables.context_len(seq_id, layer, head) % b == 0
            ]
            needs[seq_id] = heads
            demand += len(heads)
        if demand > self.free_count:
            raise PreemptionNeeded(demand - self.free_count)
        for seq_id in sorted(needs):
            for layer, head in needs[seq_id]:
                self._take(seq_id, layer, head)
        return {seq_id: len(heads) for seq_id, heads in needs.items()}

    # -- freeing --------------------------------------------------------------

    def free_blocks(self, blocks: Iterable[int]) -> None:
        """Return owned blocks to the pool and drop their table entries.

        Freed blocks must form a trailing slice of their owner's table
        (positional addressing of the surviving KVs would break otherwise);
        context lengths are clamped to the remaining capacity.
        """
        by_head: dict[tuple[int, int, int], set[int]] = {}
        for block in blocks:
            owner = self._owner.get(block)
            if owner is None:
                raise BlockOwnershipError(f"block {block} is not allocated")
            by_head.setdefault(owner, set()).add(block)
        b = self.tables.block_size
        for (seq_id, layer, head), freed in by_head.items():
            table = self.tables.blocks(seq_id, layer, head)
            keep = len(table) - len(freed)
            if set(table[keep:]) != freed:
                raise BlockOwnershipError(
                    f"blocks {sorted(freed)} are not the trailing slice of "
                    f"seq {seq_id} layer {layer} head {head}"
                )
            del table[keep:]
            ctx = self.tables.context_len(seq_id, layer, head)
            self.tables.set_context_len(seq_id, layer, head, min(ctx, keep * b))
            for block in freed:
                del self._owner[block]
                self._free_set.add(block)
                heapq.heappush(self._free_heap, block)

    def free_sequence(self, seq_id: int) -> list[int]:
        """Release every block of a sequence and drop its tables."""
        freed = list(self.tables.owned_blocks(seq_id))
        self.free_blocks(freed)
        self.tables.remove_sequence(seq_id)
        return freed


def preempt_select(running: Sequence) -> int:
    """Pick the preemption victim: the most recently admitted sequence (LIFO).

    ``running`` items expose ``seq_id`` and ``admission_index``.
    """
    if not running:
        raise NoVictimError("no running sequences to preempt")
    victim = max(running, key=lambda s: s.admission_index)
    return victim.seq_id
