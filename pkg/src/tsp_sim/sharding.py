"""Zigzag sequence partitioning and weight-shard extraction.

The sequence is cut into ``2D`` equal chunks; rank ``p`` owns chunks ``p`` and
``2D-1-p`` (one early, one late) so causal-attention work is balanced. Weight
shards are contiguous row blocks of every ``[out, in]`` projection and a
column block of ``w_o``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from tsp_sim.config import ModelConfig
from tsp_sim.tensor_core import LayerWeights, Tensor


class ShardingError(ValueError):
    """A dimension does not divide evenly across the requested degree."""


def _require_divisible(name: str, value: int, degree: int) -> None:
    if value % degree:
        raise ShardingError(f"{name}={value} is not divisible by degree {degree}")


@dataclass(frozen=True)
class ZigzagLayout:
    degree: int
    seq_len: int

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ShardingError(f"degree must be >= 1, got {self.degree}")
        if self.seq_len % (2 * self.degree):
            raise ShardingError(f"seq_len={self.seq_len} is not divisible by 2*degree={2 * self.degree}")

    @property
    def local_len(self) -> int:
        return self.seq_len // self.degree

    @property
    def chunk_len(self) -> int:
        return self.seq_len // (2 * self.degree)

    def chunks(self, rank: int) -> tuple[int, int]:
        return rank, 2 * self.degree - 1 - rank

    def owner(self, chunk: int) -> int:
        return min(chunk, 2 * self.degree - 1 - chunk)

    def positions(self, rank: int) -> np.ndarray:
        """Global token positions held by ``rank``, in local order."""
        c = self.chunk_len
        first, second = self.chunks(rank)
        return np.concatenate([np.arange(first * c, (first + 1) * c), np.arange(second * c, (second + 1) * c)])


def zigzag_partition(x: Tensor, layout: ZigzagLayout, axis: int = 1) -> list[Tensor]:
    if x.shape[axis] != layout.seq_len:
        raise ShardingError(f"sequence axis has length {x.shape[axis]}, layout expects {layout.seq_len}")
    chunks = np.split(x, 2 * layout.degree, axis=axis)
    return [np.concatenate([chunks[a], chunks[b]], axis=axis) for a, b in map(layout.chunks, range(layout.degree))]


def zigzag_reorder(gathered: Tensor, layout: ZigzagLayout, axis: int = 1) -> Tensor:
    """Invert a rank-order gather of zigzag shards back into global sequence order."""
    if gathered.shape[axis] != layout.seq_len:
        raise ShardingError(f"sequence axis has length {gathered.shape[axis]}, layout expects {layout.seq_len}")
    D = layout.degree
    pieces = np.split(gathered, 2 * D, axis=axis)
    # gathered piece 2*o is rank o's early chunk, piece 2*o+1 its late chunk
    order = [2 * layout.owner(c) + (0 if c < D else 1) for c in range(2 * D)]
    return np.concatenate([pieces[i] for i in order], axis=axis)


def causal_bounds(rank: int, degree: int, chunk_len: int) -> tuple[int, int]:
    """Key horizons of rank's early and late chunk: ``((p+1)*S_c, (2D-p)*S_c)``."""
    if not 0 <= rank < degree:
        raise ValueError(f"rank {rank} outside 0..{degree - 1}")
    return (rank + 1) * chunk_len, (2 * degree - rank) * chunk_len


@dataclass
class WeightShards:
    """One rank's slice of a layer.

    ``w_q, w_k, w_v, w1, w3, w2`` are row blocks; ``w_o`` is a column block
    ``[h, h/D]``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w1: Tensor
    w3: Tensor
    w2: Tensor


def _rows(w: Tensor, degree: int, rank: int) -> Tensor:
    n = w.shape[0] // degree
    return w[rank * n : (rank + 1) * n].copy()


def shard_weights(weights: LayerWeights, config: ModelConfig, degree: int) -> list[WeightShards]:
    """Contiguous block shards; concatenating them in rank order restores ``weights``.

    K/V blocks are ``kv_dim/D`` rows wide. When ``D`` exceeds the K/V head
    count a block holds a fraction of one head.
    """
    _require_divisible("num_heads", config.num_heads, degree)
    _require_divisible("hidden_size", config.hidden_size, degree)
    _require_divisible("kv_dim", config.kv_dim, degree)
    _require_divisible("ffn_dim", config.ffn_dim, degree)
    weights.validate(config)
    cols = config.hidden_size // degree
    return [
        WeightShards(
            w_q=_rows(weights.w_q, degree, p),
            w_k=_rows(weights.w_k, degree, p),
            w_v=_rows(weights.w_v, degree, p),
            w_o=weights.w_o[:, p * cols : (p + 1) * cols].copy(),
            w1=_rows(weights.w1, degree, p),
            w3=_rows(weights.w3, degree, p),
            w2=_rows(weights.w2, degree, p),
        )
        for p in range(degree)
    ]


def reassemble(shards: list[WeightShards]) -> LayerWeights:
    """Inverse of :func:`shard_weights`."""
    parts = {f.name: [getattr(s, f.name) for s in shards] for f in fields(WeightShards)}
    return LayerWeights(
        w_q=np.concatenate(parts["w_q"], axis=0),
        w_k=np.concatenate(parts["w_k"], axis=0),
        w_v=np.concatenate(parts["w_v"], axis=0),
        w_o=np.concatenate(parts["w_o"], axis=1),
        w1=np.concatenate(parts["w1"], axis=0),
        w3=np.concatenate(parts["w3"], axis=0),
        w2=np.concatenate(parts["w2"], axis=0),
    )


def kv_heads_for_rank(config: ModelConfig, degree: int, rank: int) -> range:
    """K/V heads read by the query heads of a head-parallel shard."""
    heads = config.num_heads // degree
    g = config.gqa_ratio
    return range((rank * heads) // g, ((rank + 1) * heads - 1) // g + 1)


def head_parallel_shards(weights: LayerWeights, config: ModelConfig, degree: int) -> list[WeightShards]:
    """Shards for head-parallel TP: each rank keeps whole K/V heads for its query heads.

    Identical to :func:`shard_weights` when ``degree`` divides the K/V head
    count. With more ranks than K/V heads, each head is replicated on the
    ``degree / num_kv_heads`` ranks whose query heads read it.
    """
    _require_divisible("num_heads", config.num_heads, degree)
    _require_divisible("ffn_dim", config.ffn_dim, degree)
    n_kv = config.num_kv_heads
    if n_kv % degree and degree % n_kv:
        raise ShardingError(f"num_kv_heads={n_kv} and degree {degree}: neither divides the other")
    weights.validate(config)
    d = config.head_dim
    cols = config.hidden_size // degree
    shards = []
    for p in range(degree):
        kv = kv_heads_for_rank(config, degree, p)
        kv_rows = slice(kv.start * d, kv.stop * d)
        shards.append(
            WeightShards(
                w_q=_rows(weights.w_q, degree, p),
                w_k=weights.w_k[kv_rows].copy(),
                w_v=weights.w_v[kv_rows].copy(),
                w_o=weights.w_o[:, p * cols : (p + 1) * cols].copy(),
                w1=_rows(weights.w1, degree, p),
                w3=_rows(weights.w3, degree, p),
                w2=_rows(weights.w2, degree, p),
            )
        )
    return shards
