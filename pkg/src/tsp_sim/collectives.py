"""Simulated rank group with byte-accounted collectives.

A single orchestrator holds every rank's tensors and executes collectives as
synchronous calls over per-rank lists, so runs are bit-reproducible and every
transferred byte is attributable. Volumes follow the ring-collective cost
model: a message of ``N`` bytes over ``D`` ranks costs each participant
``2N(D-1)/D`` (all-reduce), ``N(D-1)/D`` (all-gather, reduce-scatter) or
``N`` (broadcast, point-to-point send).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

Tensor = np.ndarray


class CollectiveKind(str, Enum):
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    BROADCAST = "broadcast"
    P2P_SEND = "p2p_send"


class Category(str, Enum):
    WEIGHT_MOVEMENT = "weight_movement"
    ACTIVATION_EXCHANGE = "activation_exchange"
    GRADIENT_SYNC = "gradient_sync"


CATEGORIES = tuple(Category)


def bytes_for(kind: CollectiveKind, message_bytes: float, group_size: int) -> float:
    """Per-participant volume of one collective on a message of ``message_bytes``."""
    if message_bytes < 0:
        raise ValueError(f"message size must be non-negative, got {message_bytes}")
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    kind = CollectiveKind(kind)
    if kind is CollectiveKind.ALL_REDUCE:
        return 2 * message_bytes * (group_size - 1) / group_size
    if kind in (CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER):
        return message_bytes * (group_size - 1) / group_size
    return float(message_bytes)


@dataclass(frozen=True)
class CollectiveCall:
    """One primitive invocation; ``ranks`` are the participants charged for it."""

    kind: CollectiveKind
    category: Category
    message_bytes: float
    group_size: int
    ranks: tuple[int, ...]

    @property
    def per_rank_bytes(self) -> float:
        return bytes_for(self.kind, self.message_bytes, self.group_size)

    @property
    def is_self_broadcast(self) -> bool:
        return self.kind is CollectiveKind.BROADCAST and self.group_size == 1


class CommLedger:
    """Per-rank, per-category byte counters plus the log of calls that produced them."""

    def __init__(self, world_size: int) -> None:
        self.world_size = world_size
        self._counters = np.zeros((world_size, len(CATEGORIES)))
        self.calls: list[CollectiveCall] = []

    def record(self, call: CollectiveCall) -> None:
        col = CATEGORIES.index(call.category)
        for rank in call.ranks:
            self._counters[rank, col] += call.per_rank_bytes
        self.calls.append(call)

    def rank_bytes(self, rank: int, category: Category | None = None) -> float:
        if category is None:
            return float(self._counters[rank].sum())
        return float(self._counters[rank, CATEGORIES.index(Category(category))])

    def total(self, category: Category | None = None) -> float:
        """Group-total volume, summed over ranks."""
        return sum(self.rank_bytes(r, category) for r in range(self.world_size))

    def per_device(self, category: Category | None = None) -> float:
        """Group total divided by the world size."""
        return self.total(category) / self.world_size

    def breakdown(self) -> dict[str, float]:
        return {c.value: self.per_device(c) for c in CATEGORIES}

    def shadow_total(self) -> float:
        """Group total recomputed from the call log alone."""
        return sum(bytes_for(c.kind, c.message_bytes, c.group_size) * len(c.ranks) for c in self.calls)

    def self_broadcast_bytes(self) -> float:
        return sum(c.per_rank_bytes for c in self.calls if c.is_self_broadcast)

    def snapshot(self) -> CommLedger:
        return copy.deepcopy(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "world_size": self.world_size,
            "per_device": self.breakdown(),
            "per_device_total": self.per_device(),
            "per_rank": [
                {c.value: self.rank_bytes(r, c) for c in CATEGORIES} for r in range(self.world_size)
            ],
            "num_calls": len(self.calls),
            "self_broadcast_bytes": self.self_broadcast_bytes(),
        }


class RankGroup:
    """``size`` simulated ranks driven in lockstep by one caller.

    Collectives take one tensor per participating rank (in the order of
    ``ranks``, defaulting to all ranks ``0..size-1``) and return one result per
    participant. ``element_bytes`` is the modelled width of a transferred
    element; the simulation itself always computes in float64.
    """

    def __init__(self, size: int, element_bytes: float = 2.0) -> None:
        if size < 1:
            raise ValueError(f"group size must be >= 1, got {size}")
        self.size = size
        self.element_bytes = float(element_bytes)
        self.ledger = CommLedger(size)
        self.slots: list[dict[str, Any]] = [{} for _ in range(size)]

    def _participants(self, ranks: Iterable[int] | None, count: int | None = None) -> tuple[int, ...]:
        members = tuple(range(self.size)) if ranks is None else tuple(ranks)
        if not members or len(set(members)) != len(members):
            raise ValueError(f"invalid participant list {members}")
        for r in members:
            if not 0 <= r < self.size:
                raise ValueError(f"rank {r} outside group of size {self.size}")
        if count is not None and count != len(members):
            raise ValueError(f"got {count} tensors for {len(members)} participants")
        return members

    def _nbytes(self, tensor: Tensor) -> float:
        return tensor.size * self.element_bytes

    def _record(self, kind: CollectiveKind, category: Category, nbytes: float, members: tuple[int, ...]) -> None:
        self.ledger.record(CollectiveCall(kind, Category(category), nbytes, len(members), members))

    def broadcast(self, src: int, tensor: Tensor, category: Category, ranks: Sequence[int] | None = None) -> list[Tensor]:
        """Replicate ``tensor`` (held by global rank ``src``) onto all participants."""
        members = self._participants(ranks)
        if src not in members:
            raise ValueError(f"broadcast source {src} is not a participant of {members}")
        self._record(CollectiveKind.BROADCAST, category, self._nbytes(tensor), members)
        return [tensor.copy() for _ in members]

    def all_gather_seq(
        self, tensors: Sequence[Tensor], category: Category, axis: int = 1, ranks: Sequence[int] | None = None
    ) -> list[Tensor]:
        """Concatenate equal-shaped shards in participant order along ``axis``."""
        members = self._participants(ranks, len(tensors))
        shape = tensors[0].shape
        for t in tensors:
            if t.shape != shape:
                raise ValueError(f"all_gather_seq: shard shapes differ ({t.shape} vs {shape})")
        gathered = np.concatenate(tensors, axis=axis)
        self._record(CollectiveKind.ALL_GATHER, category, self._nbytes(gathered), members)
        return [gathered.copy() for _ in members]

    def all_reduce_sum(
        self, tensors: Sequence[Tensor], category: Category, ranks: Sequence[int] | None = None
    ) -> list[Tensor]:
        """Element-wise sum, accumulated in participant order."""
        members = self._participants(ranks, len(tensors))
        shape = tensors[0].shape
        total = tensors[0].copy()
        for t in tensors[1:]:
            if t.shape != shape:
                raise ValueError(f"all_reduce_sum: shapes differ ({t.shape} vs {shape})")
            total += t
        self._record(CollectiveKind.ALL_REDUCE, category, self._nbytes(total), members)
        return [total.copy() for _ in members]

    def ring_shift(
        self, tensors: Sequence[Tensor], category: Category, ranks: Sequence[int] | None = None
    ) -> list[Tensor]:
        """Each participant sends to its successor; position ``i`` receives from ``i-1``."""
        members = self._participants(ranks, len(tensors))
        n = len(members)
        if n == 1:
            return [tensors[0]]
        for sender, t in zip(members, tensors):
            self.ledger.record(
                CollectiveCall(CollectiveKind.P2P_SEND, Category(category), self._nbytes(t), n, (sender,))
            )
        return [tensors[(i - 1) % n] for i in range(n)]
