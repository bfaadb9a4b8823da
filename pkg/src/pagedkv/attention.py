"""Reference attention kernels: dense causal MHA, GQA, and paged decode attention.

All math is double precision with max-subtraction-stabilized softmax.
These are correctness oracles, not performance kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import BlockTables, UnifiedKVCache
from .errors import EmptyContextError, NumericError


@dataclass(frozen=True)
class AttentionConfig:
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    num_layers: int

    def __post_init__(self):
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ValueError("num_query_heads must be divisible by num_kv_heads")

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in attention inputs")


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis; -inf entries become exact zeros."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def dense_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Causal multi-head attention over (H, L, d) inputs.

    Returns (output, attn) where attn is the (H, L, L) lower-triangular
    row-stochastic attention matrix.
    """
    _check_finite(q, k, v)
    length = q.shape[1]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    scores = np.where(np.tril(np.ones((length, length), dtype=bool)), scores, -np.inf)
    attn = _softmax_rows(scores)
    return attn @ v, attn


def gqa_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttentionConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Grouped-query attention: query head h reads KV head h // group_size.

    ``k`` and ``v`` carry only the num_kv_heads heads; nothing is repeated in
    storage. Output and attention match dense_attention on explicitly
    repeated K/V exactly.
    """
    if q.shape[0] != cfg.num_query_heads or k.shape[0] != cfg.num_kv_heads:
        raise ValueError("head counts do not match the attention config")
    if k.shape != v.shape or q.shape[1:] != k.shape[1:]:
        raise ValueError("inconsistent Q/K/V shapes")
    _check_finite(q, k, v)
    r = cfg.group_size
    n_q, length, dim = q.shape
    scale = np.sqrt(dim)
    causal = np.tril(np.ones((length, length), dtype=bool))
    out = np.empty_like(q)
    attn = np.empty((n_q, length, length))
    for kv_head in range(cfg.num_kv_heads):
        group = slice(kv_head * r, (kv_head + 1) * r)
        scores = q[group] @ k[kv_head].T / scale
        scores = np.where(causal, scores, -np.inf)
        weights = _softmax_rows(scores)
        attn[group] = weights
        out[group] = weights @ v[kv_head]
    return out, attn


def paged_attention(
    query: np.ndarray,
    cache: UnifiedKVCache,
    tables: BlockTables,
    seq_id: int,
    layer: int,
    cfg: AttentionConfig,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-token decode attention over the paged (possibly compressed) cache.

    ``query`` is (num_query_heads, head_dim). Each query head gathers the
    live KVs of its KV head through the block table, in slot order 0..C-1;
    per-head context lengths may differ. Returns the (num_query_heads,
    head_dim) output plus, per KV head, the (group_size, C) attention
    weights used — the rows the metric accumulator consumes.
    """
    _check_finite(query)
    r = cfg.group_size
    scale = np.sqrt(cfg.head_dim)
    out = np.empty((cfg.num_query_heads, cfg.head_dim))
    weights_per_head: list[np.ndarray] = []
    for kv_head in range(cfg.num_kv_heads):
        ctx = tables.context_len(seq_id, layer, kv_head)
        if ctx < 1:
            raise EmptyContextError(
                f"seq {seq_id} layer {layer} head {kv_head} has no live KVs"
            )
        flats = tables.head_slots_flat(seq_id, layer, kv_head)[:ctx]
        keys = cache.keys_flat[flats]
        values = cache.values_flat[flats]
        group = slice(kv_head * r, (kv_head + 1) * r)
        scores = query[group] @ keys.T / scale
        weights = _softmax_rows(scores)
        out[group] = weights @ values
        weights_per_head.append(weights)
    return out, weights_per_head
