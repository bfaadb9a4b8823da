"""Attention kernels against naive-loop oracles and structural properties."""

from __future__ import annotations

import numpy as np
import pytest

from pagedkv.attention import (
    AttentionConfig,
    dense_attention,
    gqa_attention,
    paged_attention,
)
from pagedkv.errors import EmptyContextError, NumericError

from helpers import CacheRig, naive_causal_attention, naive_single_query


def cfg_for(n_q, n_k, dim=4, layers=1):
    return AttentionConfig(
        num_query_heads=n_q, num_kv_heads=n_k, head_dim=dim, num_layers=layers
    )


class TestDenseAttention:
    def test_single_token_attends_to_itself(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((2, 1, 4))
        k = rng.standard_normal((2, 1, 4))
        v = rng.standard_normal((2, 1, 4))
        out, attn = dense_attention(q, k, v)
        assert np.array_equal(attn, np.ones((2, 1, 1)))
        assert np.allclose(out, v, atol=0)

    def test_strict_upper_triangle_is_exactly_zero(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((3, 7, 4)) for _ in range(3))
        _, attn = dense_attention(q, k, v)
        for h in range(3):
            assert np.array_equal(np.triu(attn[h], k=1), np.zeros((7, 7)))

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((2, 9, 6)) for _ in range(3))
        _, attn = dense_attention(q, k, v)
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-9)

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal((2, 3, 2)) for _ in range(3))
        out, attn = dense_attention(q, k, v)
        naive_out, naive_attn = naive_causal_attention(q, k, v)
        assert np.abs(attn - naive_attn).max() < 1e-12
        assert np.abs(out - naive_out).max() < 1e-12

    def test_nonfinite_input_raises(self):
        q = np.full((1, 2, 2), np.nan)
        k = np.zeros((1, 2, 2))
        with pytest.raises(NumericError):
            dense_attention(q, k, k)


class TestGQAAttention:
    def test_group_size_one_equals_dense(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.standard_normal((4, 6, 4)) for _ in range(3))
        out_d, attn_d = dense_attention(q, k, v)
        out_g, attn_g = gqa_attention(q, k, v, cfg_for(4, 4))
        assert np.array_equal(out_d, out_g)
        assert np.array_equal(attn_d, attn_g)

    def test_equals_dense_on_repeated_kv_exactly(self):
        rng = np.random.default_rng(5)
        n_q, n_k, length, dim = 8, 2, 12, 4
        q = rng.standard_normal((n_q, length, dim))
        k = rng.standard_normal((n_k, length, dim))
        v = rng.standard_normal((n_k, length, dim))
        r = n_q // n_k
        out_g, attn_g = gqa_attention(q, k, v, cfg_for(n_q, n_k))
        out_d, attn_d = dense_attention(q, np.repeat(k, r, axis=0), np.repeat(v, r, axis=0))
        assert np.array_equal(out_g, out_d)
        assert np.array_equal(attn_g, attn_d)

    def test_repeat_equivalence_bound_at_large_sizes(self):
        rng = np.random.default_rng(12)
        n_q, n_k, length, dim = 8, 2, 256, 64
        q = rng.standard_normal((n_q, length, dim))
        k = rng.standard_normal((n_k, length, dim))
        v = rng.standard_normal((n_k, length, dim))
        out_g, _ = gqa_attention(q, k, v, cfg_for(n_q, n_k, dim))
        out_d, _ = dense_attention(q, np.repeat(k, 4, axis=0), np.repeat(v, 4, axis=0))
        assert np.abs(out_g - out_d).max() <= 1e-9

    def test_four_way_grouping_at_production_head_counts(self):
        rng = np.random.default_rng(6)
        cfg = cfg_for(32, 8, dim=8)
        assert cfg.group_size == 4
        q = rng.standard_normal((32, 5, 8))
        k = rng.standard_normal((8, 5, 8))
        v = rng.standard_normal((8, 5, 8))
        out, attn = gqa_attention(q, k, v, cfg)
        assert out.shape == (32, 5, 8)
        assert attn.shape == (32, 5, 5)

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal((4, 3, 4))
        k = rng.standard_normal((3, 3, 4))  # not a divisor grouping
        with pytest.raises(ValueError):
            gqa_attention(q, k, k, cfg_for(4, 2))


def fill_sequence(rig, seq_id, n_k, length, rng):
    """Write a fresh prompt into every head; returns per-head (keys, values)."""
    rig.add_sequence(seq_id)
    per_head = {}
    for head in range(n_k):
        per_head[head] = rig.fill_head(seq_id, 0, head, [0.0] * length, rng=rng)
    return per_head


class TestPagedAttention:
    def test_single_kv_returns_its_value(self):
        rng = np.random.default_rng(8)
        rig = CacheRig(num_blocks=8, block_size=4, head_dim=4, kv_heads=1)
        per_head = fill_sequence(rig, 0, 1, 1, rng)
        cfg = cfg_for(2, 1)
        query = rng.standard_normal((2, 4))
        out, rows = paged_attention(query, rig.cache, rig.tables, 0, 0, cfg)
        assert np.allclose(out[0], per_head[0][1][0], atol=0)
        assert np.allclose(out[1], per_head[0][1][0], atol=0)
        assert rows[0].shape == (2, 1)

    def test_uncompressed_matches_gqa_last_row(self):
        rng = np.random.default_rng(9)
        n_q, n_k, length, dim = 4, 2, 11, 4
        rig = CacheRig(num_blocks=32, block_size=4, head_dim=dim, kv_heads=n_k)
        rig.add_sequence(0)
        k = rng.standard_normal((n_k, length, dim))
        v = rng.standard_normal((n_k, length, dim))
        for head in range(n_k):
            blocks = -(-length // rig.block_size)
            for _ in range(blocks):
                rig.manager._take(0, 0, head)
            flats = rig.tables.head_slots_flat(0, 0, head)[:length]
            rig.cache.keys_flat[flats] = k[head]
            rig.cache.values_flat[flats] = v[head]
            rig.tables.set_context_len(0, 0, head, length)
            rig.store.logical_flat[flats] = np.arange(length)
        q = rng.standard_normal((n_q, length, dim))
        cfg = cfg_for(n_q, n_k, dim)
        dense_out, _ = gqa_attention(q, k, v, cfg)
        paged_out, _ = paged_attention(q[:, -1, :], rig.cache, rig.tables, 0, 0, cfg)
        assert np.abs(paged_out - dense_out[:, -1, :]).max() < 1e-9

    def test_matches_kept_kv_oracle_after_manual_eviction(self):
        # evict arbitrary KVs by rewriting the head to the survivors
        rng = np.random.default_rng(10)
        dim, length = 4, 10
        rig = CacheRig(num_blocks=16, block_size=4, head_dim=dim, kv_heads=1)
        rig.add_sequence(0)
        keys, values = rig.fill_head(0, 0, 0, [0.0] * length, rng=rng)
        kept = [0, 3, 4, 7, 8]
        flats = rig.tables.head_slots_flat(0, 0, 0)[: len(kept)]
        rig.cache.keys_flat[flats] = keys[kept]
        rig.cache.values_flat[flats] = values[kept]
        rig.tables.set_context_len(0, 0, 0, len(kept))
        cfg = cfg_for(1, 1, dim)
        query = rng.standard_normal((1, dim))
        out, _ = paged_attention(query, rig.cache, rig.tables, 0, 0, cfg)
        oracle = naive_single_query(query[0], keys[kept], values[kept])
        assert np.abs(out[0] - oracle).max() < 1e-9

    def test_invariant_under_physical_block_permutation(self):
        rng = np.random.default_rng(11)
        dim, length = 4, 9

        def build(displace):
            rig = CacheRig(num_blocks=16, block_size=4, head_dim=dim, kv_heads=1)
            if displace:
                # occupy the low block numbers first so the head lands elsewhere
                rig.add_sequence(9)
                rig.fill_head(9, 0, 0, [0.0] * 20)
            rig.add_sequence(0)
            keys, values = rig.fill_head(0, 0, 0, [0.0] * length, rng=np.random.default_rng(99))
            return rig, keys, values

        rig_a, keys, values = build(False)
        rig_b, keys_b, values_b = build(True)
        assert np.array_equal(keys, keys_b)
        assert rig_a.tables.blocks(0, 0, 0) != rig_b.tables.blocks(0, 0, 0)
        cfg = cfg_for(1, 1, dim)
        query = rng.standard_normal((1, dim))
        out_a, _ = paged_attention(query, rig_a.cache, rig_a.tables, 0, 0, cfg)
        out_b, _ = paged_attention(query, rig_b.cache, rig_b.tables, 0, 0, cfg)
        assert np.array_equal(out_a, out_b)

    def test_empty_head_raises(self):
        rig = CacheRig(num_blocks=8, block_size=4, head_dim=4, kv_heads=1)
        rig.add_sequence(0)
        rig.manager._take(0, 0, 0)
        with pytest.raises(EmptyContextError):
            paged_attention(
                np.zeros((1, 4)), rig.cache, rig.tables, 0, 0, cfg_for(1, 1)
            )
