"""Forward schedules for DP, TP, SP, TP+SP and folded TSP over a simulated rank group.

Each schedule takes per-rank inputs, drives collectives on a
:class:`~tsp_sim.collectives.RankGroup` and returns per-rank outputs; the
group's ledger then holds the bytes the schedule moved. :func:`run_layer`
wires a schedule to seeded random weights and inputs and pairs its
reassembled output with the unsharded reference.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tsp_sim.collectives import Category, CommLedger, RankGroup
from tsp_sim.config import ModelConfig, Strategy, StrategyLayout, Workload
from tsp_sim.sharding import (
    ShardingError,
    WeightShards,
    ZigzagLayout,
    causal_bounds,
    head_parallel_shards,
    shard_weights,
    zigzag_partition,
    zigzag_reorder,
)
from tsp_sim.tensor_core import (
    LayerWeights,
    Tensor,
    apply_right,
    causal_attention,
    gated_mlp,
    linear,
    merge_heads,
    reference_layer,
    silu,
    split_heads,
)

WEIGHT = Category.WEIGHT_MOVEMENT
ACTIVATION = Category.ACTIVATION_EXCHANGE


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def zigzag_attention(q: Tensor, k: Tensor, v: Tensor, rank: int, layout: ZigzagLayout) -> Tensor:
    """Attention for a zigzag-local query shard against full, globally ordered K/V.

    The early half of ``q`` (chunk ``p``) sees keys ``[0, s1)``, the late half
    (chunk ``2D-1-p``) sees ``[0, s2)``; each half is offset so its rows land
    on their global positions.
    """
    c = layout.chunk_len
    s1, s2 = causal_bounds(rank, layout.degree, c)
    early = causal_attention(q[:, :c], k[:, :s1], v[:, :s1], s1 - c)
    late = causal_attention(q[:, c:], k[:, :s2], v[:, :s2], s2 - c)
    return np.concatenate([early, late], axis=1)


def _mlp_partial(x: Tensor, shard: WeightShards) -> Tensor:
    return apply_right(silu(linear(x, shard.w1)) * linear(x, shard.w3), shard.w2)


def _head_parallel_qkv(x: Tensor, shard: WeightShards, config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    d = config.head_dim
    q = split_heads(linear(x, shard.w_q), shard.w_q.shape[0] // d)
    k = split_heads(linear(x, shard.w_k), shard.w_k.shape[0] // d)
    v = split_heads(linear(x, shard.w_v), shard.w_v.shape[0] // d)
    return q, k, v


def pack_attention_shard(shard: WeightShards) -> Tensor:
    """Flatten ``[w_q | w_k | w_v | w_o^T]`` row-major into one broadcast buffer."""
    return np.concatenate([shard.w_q.ravel(), shard.w_k.ravel(), shard.w_v.ravel(), shard.w_o.T.ravel()])


def unpack_attention_shard(buf: Tensor, config: ModelConfig, degree: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Inverse of :func:`pack_attention_shard`; returns ``(w_q, w_k, w_v, w_o^T)``."""
    h = config.hidden_size
    q_rows, kv_rows = h // degree, config.kv_dim // degree
    sizes = [q_rows * h, kv_rows * h, kv_rows * h, q_rows * h]
    if buf.size != sum(sizes):
        raise ValueError(f"packed attention shard has {buf.size} elements, expected {sum(sizes)}")
    w_q, w_k, w_v, w_o_t = np.split(buf, np.cumsum(sizes)[:-1])
    return (
        w_q.reshape(q_rows, h),
        w_k.reshape(kv_rows, h),
        w_v.reshape(kv_rows, h),
        w_o_t.reshape(q_rows, h),
    )


# ---------------------------------------------------------------------------
# TSP
# ---------------------------------------------------------------------------


@dataclass
class _ShardAttention:
    """Work for one broadcast weight shard, kept until its K/V context is complete."""

    owner: int
    q: list[Tensor]
    w_o_t: list[Tensor]
    buckets: list[tuple[range, range]] = field(default_factory=list)  # (local q heads, global kv heads)


def _bucket_attention(
    q_bucket: Tensor, k_ctx: Tensor, v_ctx: Tensor, heads: range, kv: range, config: ModelConfig, rank: int,
    layout: ZigzagLayout,
) -> Tensor:
    d, g = config.head_dim, config.gqa_ratio
    B, S = k_ctx.shape[:2]
    cols = slice(kv.start * d, kv.stop * d)
    k = k_ctx[:, :, cols].reshape(B, S, len(kv), d)
    v = v_ctx[:, :, cols].reshape(B, S, len(kv), d)
    kv_of_head = np.array([h // g - kv.start for h in heads])
    n, nkv = len(heads), len(kv)
    if n % nkv or not np.array_equal(kv_of_head, np.arange(n) // (n // nkv)):
        # bucket straddles K/V groups unevenly: hand each query head its own K/V
        k, v = k[:, :, kv_of_head], v[:, :, kv_of_head]
    return zigzag_attention(q_bucket, k, v, rank, layout)


def tsp_attention_forward(
    group: RankGroup,
    x_shards: Sequence[Tensor],
    shards: Sequence[WeightShards],
    config: ModelConfig,
    head_bucket: int | None = None,
) -> list[Tensor]:
    """Folded attention: loop over broadcast weight shards, all-gather K/V along the sequence.

    For each weight-owning rank ``r`` every rank receives the packed
    ``[w_q | w_k | w_v | w_o^T]`` shard, projects its zigzag tokens, all-gathers
    the new K/V columns per head bucket, and accumulates the shard's output
    projection into its local ``Y``. When a K/V head is split across several
    weight shards (more ranks than K/V heads) the attention for the shard's
    query heads waits until the remaining columns arrive; accumulation into
    ``Y`` still happens in ascending ``r``.
    """
    D = group.size
    if len(x_shards) != D or len(shards) != D:
        raise ValueError(f"expected {D} input and weight shards, got {len(x_shards)} and {len(shards)}")
    B, S_loc, _ = x_shards[0].shape
    layout = ZigzagLayout(D, S_loc * D)
    if config.num_heads % D:
        raise ShardingError(f"num_heads={config.num_heads} is not divisible by degree {D}")
    heads_per_shard = config.num_heads // D
    bucket = heads_per_shard if head_bucket is None else head_bucket
    if bucket < 1 or heads_per_shard % bucket:
        raise ShardingError(f"head bucket {bucket} does not divide {heads_per_shard} heads per shard")
    d, g = config.head_dim, config.gqa_ratio
    kv_width = config.kv_dim // D

    k_ctx = [np.zeros((B, layout.seq_len, config.kv_dim)) for _ in range(D)]
    v_ctx = [np.zeros((B, layout.seq_len, config.kv_dim)) for _ in range(D)]
    have = np.zeros(config.kv_dim, dtype=bool)
    y = [np.zeros_like(x, dtype=np.float64) for x in x_shards]
    pending: deque[_ShardAttention] = deque()

    for r in range(D):
        received = group.broadcast(r, pack_attention_shard(shards[r]), WEIGHT)
        unpacked = [unpack_attention_shard(buf, config, D) for buf in received]
        q = [split_heads(linear(x, u[0]), heads_per_shard) for x, u in zip(x_shards, unpacked)]
        k_loc = [linear(x, u[1]) for x, u in zip(x_shards, unpacked)]
        v_loc = [linear(x, u[2]) for x, u in zip(x_shards, unpacked)]
        work = _ShardAttention(r, q, [u[3] for u in unpacked])
        own = np.arange(r * kv_width, (r + 1) * kv_width)

        for b in range(0, heads_per_shard, bucket):
            first = r * heads_per_shard + b
            kv = range(first // g, (first + bucket - 1) // g + 1)
            need = np.arange(kv.start * d, kv.stop * d)
            fresh = need[np.isin(need, own) & ~have[need]]
            if fresh.size:
                lo, hi = int(fresh[0]), int(fresh[-1]) + 1
                assert hi - lo == fresh.size
                a, z = lo - own[0], hi - own[0]
                packed = [np.concatenate([k[..., a:z], v[..., a:z]], axis=-1) for k, v in zip(k_loc, v_loc)]
                gathered = group.all_gather_seq(packed, ACTIVATION, axis=1)
                n = hi - lo
                for p in range(D):
                    ordered = zigzag_reorder(gathered[p], layout)
                    k_ctx[p][..., lo:hi] = ordered[..., :n]
                    v_ctx[p][..., lo:hi] = ordered[..., n:]
                have[lo:hi] = True
            work.buckets.append((range(b, b + bucket), kv))
        pending.append(work)

        while pending and all(have[kv.start * d : kv.stop * d].all() for _, kv in pending[0].buckets):
            done = pending.popleft()
            base = done.owner * heads_per_shard
            for p in range(D):
                a_out = np.zeros((B, S_loc, heads_per_shard, d))
                for local, kv in done.buckets:
                    heads = range(base + local.start, base + local.stop)
                    a_out[:, :, local.start : local.stop] = _bucket_attention(
                        done.q[p][:, :, local.start : local.stop], k_ctx[p], v_ctx[p], heads, kv, config, p, layout
                    )
                y[p] += apply_right(merge_heads(a_out), done.w_o_t[p])

    if pending:
        raise RuntimeError("K/V context incomplete after visiting every weight shard")
    return y


def tsp_ring_mlp_forward(group: RankGroup, x_shards: Sequence[Tensor], shards: Sequence[WeightShards]) -> list[Tensor]:
    """Gated MLP with ``w1, w2, w3`` shards circulating in a ring; outputs stay local."""
    D = group.size
    w1 = [s.w1 for s in shards]
    w2 = [s.w2 for s in shards]
    w3 = [s.w3 for s in shards]
    y = [np.zeros_like(x, dtype=np.float64) for x in x_shards]
    for t in range(D):
        if t < D - 1:
            # issued before the compute below, consumed after it
            incoming = (
                group.ring_shift(w1, WEIGHT),
                group.ring_shift(w2, WEIGHT),
                group.ring_shift(w3, WEIGHT),
            )
        for p, x in enumerate(x_shards):
            y[p] += apply_right(silu(linear(x, w1[p])) * linear(x, w3[p]), w2[p])
        if t < D - 1:
            w1, w2, w3 = incoming
    return y


def tsp_forward(
    group: RankGroup,
    x_shards: Sequence[Tensor],
    shards: Sequence[WeightShards],
    config: ModelConfig,
    head_bucket: int | None = None,
) -> list[Tensor]:
    attn = tsp_attention_forward(group, x_shards, shards, config, head_bucket)
    return tsp_ring_mlp_forward(group, attn, shards)


# ---------------------------------------------------------------------------
# TP
# ---------------------------------------------------------------------------


def tp_attention_forward(
    group: RankGroup, xs: Sequence[Tensor], shards: Sequence[WeightShards], config: ModelConfig,
    ranks: Sequence[int] | None = None,
) -> list[Tensor]:
    """Head-parallel attention on full-sequence inputs, partial projections all-reduced."""
    partial = []
    for x, shard in zip(xs, shards):
        q, k, v = _head_parallel_qkv(x, shard, config)
        partial.append(apply_right(merge_heads(causal_attention(q, k, v, 0)), shard.w_o.T))
    return group.all_reduce_sum(partial, ACTIVATION, ranks)


def tp_mlp_forward(
    group: RankGroup, xs: Sequence[Tensor], shards: Sequence[WeightShards], ranks: Sequence[int] | None = None
) -> list[Tensor]:
    """Column-parallel gate/up, row-parallel down projection, one all-reduce."""
    return group.all_reduce_sum([_mlp_partial(x, s) for x, s in zip(xs, shards)], ACTIVATION, ranks)


def tp_forward(group: RankGroup, xs: Sequence[Tensor], shards: Sequence[WeightShards], config: ModelConfig) -> list[Tensor]:
    return tp_mlp_forward(group, tp_attention_forward(group, xs, shards, config), shards)


# ---------------------------------------------------------------------------
# SP
# ---------------------------------------------------------------------------


def _gathered_attention(
    group: RankGroup,
    x_shards: Sequence[Tensor],
    projections: Sequence[WeightShards],
    config: ModelConfig,
    layout: ZigzagLayout,
    seq_ranks: Sequence[int],
    w_o_t: Sequence[Tensor],
) -> list[Tensor]:
    """All-gather [K|V] across ``seq_ranks`` and attend with zigzag bounds."""
    q, packed = [], []
    for x, shard in zip(x_shards, projections):
        qh, k, v = _head_parallel_qkv(x, shard, config)
        q.append(qh)
        packed.append(np.concatenate([merge_heads(k), merge_heads(v)], axis=-1))
    gathered = group.all_gather_seq(packed, ACTIVATION, axis=1, ranks=seq_ranks)
    out = []
    for p, (qh, full) in enumerate(zip(q, gathered)):
        ordered = zigzag_reorder(full, layout)
        width = ordered.shape[-1] // 2
        k = split_heads(ordered[..., :width], width // config.head_dim)
        v = split_heads(ordered[..., width:], width // config.head_dim)
        out.append(apply_right(merge_heads(zigzag_attention(qh, k, v, p, layout)), w_o_t[p]))
    return out


def _full_as_shard(weights: LayerWeights) -> WeightShards:
    return WeightShards(weights.w_q, weights.w_k, weights.w_v, weights.w_o, weights.w1, weights.w3, weights.w2)


def sp_attention_forward(
    group: RankGroup, x_shards: Sequence[Tensor], weights: LayerWeights, config: ModelConfig
) -> list[Tensor]:
    """Replicated weights, zigzag tokens, one packed K/V all-gather."""
    D = group.size
    layout = ZigzagLayout(D, x_shards[0].shape[1] * D)
    full = _full_as_shard(weights)
    return _gathered_attention(group, x_shards, [full] * D, config, layout, range(D), [weights.w_o.T] * D)


def sp_forward(group: RankGroup, x_shards: Sequence[Tensor], weights: LayerWeights, config: ModelConfig) -> list[Tensor]:
    attn = sp_attention_forward(group, x_shards, weights, config)
    return [gated_mlp(a, weights.w1, weights.w3, weights.w2) for a in attn]


# ---------------------------------------------------------------------------
# TP+SP on a T x Sigma grid
# ---------------------------------------------------------------------------


def grid_rank(t: int, s: int, tp_degree: int) -> int:
    """Global rank of grid cell (TP index ``t``, SP index ``s``); TP groups are contiguous."""
    return s * tp_degree + t


def tpsp_forward(
    group: RankGroup,
    x_shards: Sequence[Tensor],
    shards: Sequence[WeightShards],
    config: ModelConfig,
    tp_degree: int,
    sp_degree: int,
) -> list[Tensor]:
    """Weights head-sharded over T, tokens zigzag-sharded over Sigma.

    ``x_shards`` has one entry per SP index and ``shards`` one per TP index.
    Returns one output per global rank; ranks in the same TP group hold the
    same sequence shard.
    """
    T, Sg = tp_degree, sp_degree
    if T * Sg != group.size:
        raise ValueError(f"grid {T}x{Sg} does not match group size {group.size}")
    if len(x_shards) != Sg or len(shards) != T:
        raise ValueError(f"expected {Sg} sequence shards and {T} weight shards")
    layout = ZigzagLayout(Sg, x_shards[0].shape[1] * Sg)

    attn = [None] * group.size
    for t in range(T):
        seq_ranks = [grid_rank(t, s, T) for s in range(Sg)]
        outs = _gathered_attention(
            group, x_shards, [shards[t]] * Sg, config, layout, seq_ranks, [shards[t].w_o.T] * Sg
        )
        for s, o in enumerate(outs):
            attn[grid_rank(t, s, T)] = o

    y = [None] * group.size
    for s in range(Sg):
        tp_ranks = [grid_rank(t, s, T) for t in range(T)]
        reduced = group.all_reduce_sum([attn[r] for r in tp_ranks], ACTIVATION, tp_ranks)
        mlp = group.all_reduce_sum([_mlp_partial(a, shards[t]) for t, a in enumerate(reduced)], ACTIVATION, tp_ranks)
        for r, out in zip(tp_ranks, mlp):
            y[r] = out
    return y


# ---------------------------------------------------------------------------
# DP
# ---------------------------------------------------------------------------


def dp_forward(group: RankGroup, x_batches: Sequence[Tensor], weights: LayerWeights, config: ModelConfig) -> list[Tensor]:
    """Every rank runs the full layer on its own micro-batch; no forward traffic."""
    return [reference_layer(x, weights, config) for x in x_batches]


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class PassResult:
    layout: StrategyLayout
    outputs: list[Tensor]
    assembled: Tensor
    reference: Tensor
    ledger: CommLedger

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.assembled - self.reference)))

    @property
    def rel_error(self) -> float:
        """Max absolute deviation relative to the reference's max magnitude."""
        scale = float(np.max(np.abs(self.reference)))
        return self.max_abs_error / scale if scale > 0 else self.max_abs_error


def make_inputs(config: ModelConfig, batch: int, seq_len: int, seed: int) -> tuple[LayerWeights, Tensor]:
    """Seeded weights and activations, uniform in [-0.1, 0.1]; weights drawn first."""
    rng = np.random.default_rng(seed)
    weights = LayerWeights.random(config, rng)
    x = rng.uniform(-0.1, 0.1, size=(batch, seq_len, config.hidden_size))
    return weights, x


def run_layer(layout: StrategyLayout, config: ModelConfig, workload: Workload, seed: int) -> PassResult:
    """One seeded forward pass of attention + MLP under ``layout``, with its reference."""
    D = layout.degree
    B, S = workload.batch_size, workload.seq_len
    strategy = layout.strategy
    # DP's micro-batch is per GPU; every other strategy shares one micro-batch
    weights, x = make_inputs(config, B * D if strategy is Strategy.DP else B, S, seed)
    reference = reference_layer(x, weights, config)
    group = RankGroup(D, config.param_bytes)

    if strategy is Strategy.DP:
        outputs = dp_forward(group, np.split(x, D, axis=0), weights, config)
        assembled = np.concatenate(outputs, axis=0)
    elif strategy is Strategy.TP:
        outputs = tp_forward(group, [x] * D, head_parallel_shards(weights, config, D), config)
        assembled = outputs[0]
    elif strategy is Strategy.SP:
        zz = ZigzagLayout(D, S)
        outputs = sp_forward(group, zigzag_partition(x, zz), weights, config)
        assembled = zigzag_reorder(np.concatenate(outputs, axis=1), zz)
    elif strategy is Strategy.TSP:
        zz = ZigzagLayout(D, S)
        outputs = tsp_forward(
            group, zigzag_partition(x, zz), shard_weights(weights, config, D), config, layout.head_bucket
        )
        assembled = zigzag_reorder(np.concatenate(outputs, axis=1), zz)
    else:
        T, Sg = layout.tp_degree, layout.sp_degree
        zz = ZigzagLayout(Sg, S)
        outputs = tpsp_forward(
            group, zigzag_partition(x, zz), head_parallel_shards(weights, config, T), config, T, Sg
        )
        assembled = zigzag_reorder(np.concatenate([outputs[grid_rank(0, s, T)] for s in range(Sg)], axis=1), zz)

    return PassResult(layout, outputs, assembled, reference, group.ledger.snapshot())
