"""Independent reference oracles and shared rig builders for the test suite.

The oracles are deliberately written as plain Python loops so they share no
code path with the vectorized implementations they check.
"""

from __future__ import annotations

import math

import numpy as np

from pagedkv.block_manager import BlockManager
from pagedkv.cache import BlockTables, UnifiedKVCache, append_kv
from pagedkv.metrics import MetricsStore


# ---------------------------------------------------------------------------
# Attention oracles
# ---------------------------------------------------------------------------


def naive_causal_attention(q, k, v):
    """Double-loop causal softmax attention over (H, L, d) inputs."""
    n_heads, length, dim = q.shape
    attn = np.zeros((n_heads, length, length))
    out = np.zeros_like(q)
    for h in range(n_heads):
        for i in range(length):
            scores = [
                float(np.dot(q[h, i], k[h, j])) / math.sqrt(dim) for j in range(i + 1)
            ]
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            norm = sum(exps)
            for j in range(i + 1):
                attn[h, i, j] = exps[j] / norm
                out[h, i] += attn[h, i, j] * v[h, j]
    return out, attn


def naive_single_query(q_vec, keys, values):
    """Softmax attention of one query over a list of key/value rows."""
    dim = len(q_vec)
    scores = [float(np.dot(q_vec, key)) / math.sqrt(dim) for key in keys]
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    norm = sum(exps)
    out = np.zeros_like(np.asarray(values[0], dtype=float))
    for weight, value in zip(exps, values):
        out += (weight / norm) * np.asarray(value, dtype=float)
    return out


# ---------------------------------------------------------------------------
# Metric oracles (triple loops over queries, group heads, keys)
# ---------------------------------------------------------------------------


def _f(value, aggregation):
    return value * value if aggregation == "L2" else value


def naive_window_metrics(attn, window, pool, aggregation, num_kv_heads):
    n_q, length, _ = attn.shape
    r = n_q // num_kv_heads
    raw = np.zeros((num_kv_heads, length))
    for k in range(num_kv_heads):
        for j in range(length):
            for i in range(max(length - window, 0), length):
                for h in range(k * r, (k + 1) * r):
                    raw[k, j] += _f(attn[h, i, j], aggregation)
    pooled = np.zeros_like(raw)
    half = pool // 2
    for k in range(num_kv_heads):
        for j in range(length):
            window_vals = [
                raw[k, t] for t in range(max(0, j - half), min(length, j + half + 1))
            ]
            pooled[k, j] = max(window_vals)
    return pooled


def naive_full_metrics(attn, excluded, aggregation, num_kv_heads):
    n_q, length, _ = attn.shape
    r = n_q // num_kv_heads
    out = np.zeros((num_kv_heads, length))
    for k in range(num_kv_heads):
        for j in range(length):
            for i in range(j + excluded, length):
                for h in range(k * r, (k + 1) * r):
                    out[k, j] += _f(attn[h, i, j], aggregation)
    return out


# ---------------------------------------------------------------------------
# Eviction oracle
# ---------------------------------------------------------------------------


def smallest_k(metrics, k):
    """The k lowest metrics of a head, as a sorted list (brute-force oracle)."""
    return sorted(float(m) for m in metrics)[:k]


# ---------------------------------------------------------------------------
# Cache rig
# ---------------------------------------------------------------------------


class CacheRig:
    """A cache + tables + manager + store bundle with low-level seeding helpers."""

    def __init__(self, num_blocks=64, block_size=4, head_dim=4, layers=1, kv_heads=1):
        self.block_size = block_size
        self.head_dim = head_dim
        self.cache = UnifiedKVCache(num_blocks, block_size, head_dim)
        self.tables = BlockTables(layers, kv_heads, block_size)
        self.manager = BlockManager(num_blocks, self.tables)
        self.store = MetricsStore(num_blocks, block_size)

    def add_sequence(self, seq_id):
        self.tables.add_sequence(seq_id)

    def fill_head(self, seq_id, layer, head, metrics, protected=None, rng=None):
        """Populate one head with len(metrics) KVs and the given metric values.

        Returns (keys, values) in logical order for later oracle checks.
        """
        metrics = list(metrics)
        count = len(metrics)
        if rng is None:
            rng = np.random.default_rng(0)
        blocks = -(-count // self.block_size)
        for _ in range(blocks):
            self.manager._take(seq_id, layer, head)
        keys = rng.standard_normal((count, self.head_dim))
        values = rng.standard_normal((count, self.head_dim))
        for i in range(count):
            handle = append_kv(
                self.tables, self.cache, seq_id, layer, head, keys[i], values[i]
            )
            self.store.on_append(handle, logical=i)
            self.store.metrics[handle.block, handle.offset] = metrics[i]
            if protected is not None and protected[i]:
                self.store.protected[handle.block, handle.offset] = True
        return keys, values

    def head_state(self, seq_id, layer, head):
        """Kept (logical, key, value, metric) tuples of a head, by logical index."""
        ctx = self.tables.context_len(seq_id, layer, head)
        flats = self.tables.head_slots_flat(seq_id, layer, head)[:ctx]
        rows = []
        for flat in flats:
            rows.append(
                (
                    int(self.store.logical_flat[flat]),
                    self.cache.keys_flat[flat].copy(),
                    self.cache.values_flat[flat].copy(),
                    float(self.store.metrics_flat[flat]),
                )
            )
        rows.sort(key=lambda row: row[0])
        return rows
