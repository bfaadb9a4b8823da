"""Exception types shared across the package."""

from __future__ import annotations


class PagedKVError(Exception):
    """Base class for all pagedkv errors."""


class PositionError(PagedKVError, IndexError):
    """A logical position is outside the live range of its head."""


class CacheCorruptionError(PagedKVError):
    """Cache state is internally inconsistent (signals a block-manager bug)."""


class AllocationOrderError(PagedKVError):
    """A write was attempted before the backing block was allocated."""


class BlockOwnershipError(PagedKVError):
    """A block was freed twice or freed by a non-owner."""


class NoVictimError(PagedKVError):
    """Preemption was requested with no running sequences."""


class EmptyContextError(PagedKVError):
    """Attention was requested over a head with zero live KVs."""


class NumericError(PagedKVError):
    """Non-finite values reached a numeric kernel."""


class BudgetError(PagedKVError):
    """An eviction budget exceeds what the cache can legally evict."""


class ScheduleCorruptionError(PagedKVError):
    """A compression schedule violates the compaction contract."""


class ConfigError(PagedKVError):
    """Invalid configuration value; ``field`` names the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class InfeasibleWorkloadError(PagedKVError):
    """The workload can never run to completion under the given memory."""


class PreemptionNeeded(Exception):
    """Control-flow signal: an allocation cannot be satisfied.

    ``shortfall`` is the number of blocks missing from the free pool.
    """

    def __init__(self, shortfall: int):
        super().__init__(f"allocation short by {shortfall} blocks")
        self.shortfall = shortfall
