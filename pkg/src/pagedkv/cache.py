"""Unified physical KV store and per-(sequence, layer, head) block tables.

The whole cache is one contiguous pool of ``num_blocks`` blocks holding
``block_size`` key/value slots each, shared by every layer and KV head.
Each head owns a private list of physical block numbers; a KV at position
``i`` of a head lives at block ``table[i // b]``, offset ``i % b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import (
    AllocationOrderError,
    CacheCorruptionError,
    PositionError,
)


@dataclass(frozen=True)
class SlotHandle:
    """Physical address of one KV slot."""

    block: int
    offset: int

    def flat(self, block_size: int) -> int:
        return self.block * block_size + self.offset


class UnifiedKVCache:
    """Pre-allocated key/value pool of shape (num_blocks, block_size, head_dim).

    Key and value stores share slot addressing exactly. The pool never grows:
    it models a fixed device memory budget.
    """

    def __init__(self, num_blocks: int, block_size: int, head_dim: int):
        if num_blocks < 1 or block_size < 1 or head_dim < 1:
            raise ValueError("num_blocks, block_size and head_dim must be >= 1")
        self.num_blocks = num_blocks
        self.block_size = block_size
        self.head_dim = head_dim
        self.keys = np.zeros((num_blocks, block_size, head_dim))
        self.values = np.zeros((num_blocks, block_size, head_dim))

    @property
    def keys_flat(self) -> np.ndarray:
        # Row-major view: slot (n, o) is row n*block_size + o.
        return self.keys.reshape(self.num_blocks * self.block_size, self.head_dim)

    @property
    def values_flat(self) -> np.ndarray:
        return self.values.reshape(self.num_blocks * self.block_size, self.head_dim)


class BlockTables:
    """Per-sequence, per-layer, per-KV-head block tables and context lengths.

    Block numbers are owned exclusively: no physical block ever appears in
    two tables. A head with context length C owns exactly ceil(C / b) blocks,
    and its live KVs occupy slot positions 0..C-1 in table order.
    """

    def __init__(self, num_layers: int, num_kv_heads: int, block_size: int):
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.block_size = block_size
        self._tables: dict[int, list[list[list[int]]]] = {}
        self._context_lens: dict[int, np.ndarray] = {}

    # -- sequence lifecycle ---------------------------------------------------

    def add_sequence(self, seq_id: int) -> None:
        if seq_id in self._tables:
            raise ValueError(f"sequence {seq_id} already has tables")
        self._tables[seq_id] = [
            [[] for _ in range(self.num_kv_heads)] for _ in range(self.num_layers)
        ]
        self._context_lens[seq_id] = np.zeros(
            (self.num_layers, self.num_kv_heads), dtype=np.int64
        )

    def remove_sequence(self, seq_id: int) -> None:
        del self._tables[seq_id]
        del self._context_lens[seq_id]

    def has_sequence(self, seq_id: int) -> bool:
        return seq_id in self._tables

    @property
    def sequences(self) -> list[int]:
        return list(self._tables)

    # -- per-head access ------------------------------------------------------

    def blocks(self, seq_id: int, layer: int, head: int) -> list[int]:
        return self._tables[seq_id][layer][head]

    def context_len(self, seq_id: int, layer: int, head: int) -> int:
        return int(self._context_lens[seq_id][layer, head])

    def set_context_len(self, seq_id: int, layer: int, head: int, value: int) -> None:
        self._context_lens[seq_id][layer, head] = value

    def heads(self, seq_id: int) -> Iterator[tuple[int, int]]:
        for layer in range(self.num_layers):
            for head in range(self.num_kv_heads):
                yield layer, head

    def owned_blocks(self, seq_id: int) -> Iterator[int]:
        for layer, head in self.heads(seq_id):
            yield from self._tables[seq_id][layer][head]

    def sequence_block_count(self, seq_id: int) -> int:
        return sum(len(self._tables[seq_id][layer][head]) for layer, head in self.heads(seq_id))

    def allocated_kv_count(self, seq_id: int) -> int:
        return int(self._context_lens[seq_id].sum())

    def head_slots_flat(self, seq_id: int, layer: int, head: int) -> np.ndarray:
        """Flat slot indices of every allocated slot of a head, in table order."""
        blocks = np.asarray(self._tables[seq_id][layer][head], dtype=np.int64)
        b = self.block_size
        return (blocks[:, None] * b + np.arange(b, dtype=np.int64)).ravel()

    def slot_for(self, seq_id: int, layer: int, head: int, position: int) -> SlotHandle:
        """Resolve a position to its physical slot: block table[i // b], offset i % b."""
        b = self.block_size
        table = self._tables[seq_id][layer][head]
        u, o = divmod(position, b)
        if u >= len(table):
            raise CacheCorruptionError(
                f"position {position} of seq {seq_id} layer {layer} head {head} "
                f"maps to table entry {u} but only {len(table)} blocks are allocated"
            )
        return SlotHandle(table[u], o)


def lookup_kv(
    tables: BlockTables,
    cache: UnifiedKVCache,
    seq_id: int,
    layer: int,
    head: int,
    position: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Read the key/value vectors stored at a head's logical position."""
    ctx = tables.context_len(seq_id, layer, head)
    if position < 0 or position >= ctx:
        raise PositionError(
            f"position {position} out of range for context length {ctx}"
        )
    handle = tables.slot_for(seq_id, layer, head, position)
    key = cache.keys[handle.block, handle.offset].copy()
    value = cache.values[handle.block, handle.offset].copy()
    return key, value


def append_kv(
    tables: BlockTables,
    cache: UnifiedKVCache,
    seq_id: int,
    layer: int,
    head: int,
    key: np.ndarray,
    value: np.ndarray,
) -> SlotHandle:
    """Store one KV at the head's next position; the backing block must exist."""
    ctx = tables.context_len(seq_id, layer, head)
    try:
        handle = tables.slot_for(seq_id, layer, head, ctx)
    except CacheCorruptionError as exc:
        raise AllocationOrderError(
            f"no block allocated for position {ctx} of seq {seq_id} "
            f"layer {layer} head {head}"
        ) from exc
    cache.keys[handle.block, handle.offset] = key
    cache.values[handle.block, handle.offset] = value
    tables.set_context_len(seq_id, layer, head, ctx + 1)
    return handle


def fragmentation(tables: BlockTables) -> int:
    """Total allocated-but-unused slots across all heads.

    Bounded by l * B * H * (b - 1): each head wastes at most b-1 slots in its
    partially filled last block.
    """
    b = tables.block_size
    total = 0
    for seq_id in tables.sequences:
        lens = tables._context_lens[seq_id]
        total += int((-(-lens // b) * b - lens).sum())
    return total
