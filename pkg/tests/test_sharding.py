import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsp_sim.config import ModelConfig
from tsp_sim.sharding import (
    ShardingError,
    ZigzagLayout,
    causal_bounds,
    head_parallel_shards,
    kv_heads_for_rank,
    reassemble,
    shard_weights,
    zigzag_partition,
    zigzag_reorder,
)
from tsp_sim.tensor_core import LayerWeights


def test_layout_example():
    zz = ZigzagLayout(4, 16)
    assert zz.chunk_len == 2 and zz.local_len == 4
    assert [zz.chunks(p) for p in range(4)] == [(0, 7), (1, 6), (2, 5), (3, 4)]
    np.testing.assert_array_equal(zz.positions(1), [2, 3, 12, 13])
    assert zz.owner(6) == 1


def test_layout_rejects_indivisible():
    with pytest.raises(ShardingError):
        ZigzagLayout(4, 12)
    with pytest.raises(ShardingError):
        ZigzagLayout(0, 12)


def test_partition_holds_positions():
    zz = ZigzagLayout(2, 8)
    x = np.arange(8.0).reshape(1, 8, 1)
    parts = zigzag_partition(x, zz)
    for p, part in enumerate(parts):
        np.testing.assert_array_equal(part[0, :, 0], zz.positions(p))


@given(b=st.integers(1, 3), d=st.integers(1, 16), c=st.integers(1, 4), seed=st.integers(0, 1000))
def test_roundtrip(b, d, c, seed):
    zz = ZigzagLayout(d, 2 * d * c)
    x = np.random.default_rng(seed).normal(size=(b, zz.seq_len, 2))
    gathered = np.concatenate(zigzag_partition(x, zz), axis=1)
    np.testing.assert_array_equal(zigzag_reorder(gathered, zz), x)


def test_partition_wrong_length():
    with pytest.raises(ShardingError):
        zigzag_partition(np.zeros((1, 6, 1)), ZigzagLayout(2, 8))


def test_causal_bounds_balanced():
    for D in range(1, 65):
        totals = {sum(causal_bounds(p, D, 3)) for p in range(D)}
        assert totals == {(2 * D + 1) * 3}
    assert causal_bounds(0, 4, 2) == (2, 16)
    with pytest.raises(ValueError):
        causal_bounds(4, 4, 2)


@pytest.fixture
def cfg():
    return ModelConfig(hidden_size=32, num_layers=1, num_heads=8, num_kv_heads=4, ffn_factor=2)


@pytest.mark.parametrize("D", [1, 2, 4, 8])
def test_shard_reassemble(cfg, D):
    w = LayerWeights.random(cfg, np.random.default_rng(0))
    shards = shard_weights(w, cfg, D)
    assert shards[0].w_o.shape == (32, 32 // D)
    assert shards[0].w_k.shape == (cfg.kv_dim // D, 32)
    assert reassemble(shards).equals(w)


def test_shard_rejects_indivisible(cfg):
    w = LayerWeights.random(cfg, np.random.default_rng(0))
    with pytest.raises(ShardingError):
        shard_weights(w, cfg, 3)


def test_kv_heads_for_rank(cfg):
    assert [kv_heads_for_rank(cfg, 4, p) for p in range(4)] == [range(0, 1), range(1, 2), range(2, 3), range(3, 4)]
    assert list(kv_heads_for_rank(cfg, 8, 5)) == [2]
    assert list(kv_heads_for_rank(cfg, 2, 1)) == [2, 3]


def test_head_parallel_replicates_kv(cfg):
    w = LayerWeights.random(cfg, np.random.default_rng(0))
    shards = head_parallel_shards(w, cfg, 8)
    d = cfg.head_dim
    # ranks 4 and 5 both read K/V head 2
    np.testing.assert_array_equal(shards[4].w_k, w.w_k[2 * d : 3 * d])
    np.testing.assert_array_equal(shards[5].w_k, shards[4].w_k)
    same = head_parallel_shards(w, cfg, 4)
    assert reassemble(same).equals(w)


def test_head_parallel_rejects_incompatible():
    cfg = ModelConfig(hidden_size=48, num_layers=1, num_heads=12, num_kv_heads=6, ffn_factor=2)
    w = LayerWeights.random(cfg, np.random.default_rng(0))
    with pytest.raises(ShardingError):
        head_parallel_shards(w, cfg, 4)
