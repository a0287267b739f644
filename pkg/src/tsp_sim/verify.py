"""Equivalence and ledger-agreement matrix over strategies, degrees, GQA ratios and head buckets."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

from tsp_sim.collectives import Category
from tsp_sim.config import ModelConfig, Phase, Strategy, StrategyLayout, Workload
from tsp_sim.cost_model import comm_volume
from tsp_sim.schedules import PassResult, run_layer

REL_TOL = 1e-9
BYTE_TOL = 1.0
DEGREES = (1, 2, 4, 8)


@dataclass(frozen=True)
class Scale:
    batch: int
    seq_len: int
    hidden: int
    heads: int
    ffn_factor: int

    def model(self, kv_heads: int, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        return replace(
            base,
            hidden_size=self.hidden,
            num_layers=1,
            num_heads=self.heads,
            num_kv_heads=kv_heads,
            ffn_factor=self.ffn_factor,
        )

    def workload(self) -> Workload:
        return Workload(batch_size=self.batch, seq_len=self.seq_len)


SCALES = {
    "tiny": Scale(batch=1, seq_len=32, hidden=32, heads=8, ffn_factor=2),
    "small": Scale(batch=1, seq_len=128, hidden=64, heads=8, ffn_factor=4),
    "medium": Scale(batch=1, seq_len=256, hidden=128, heads=16, ffn_factor=4),
}


@dataclass(frozen=True)
class Cell:
    layout: StrategyLayout
    kv_heads: int
    rel_error: float
    ledger: dict[str, float]
    formula: dict[str, float]

    @property
    def equivalent(self) -> bool:
        return self.rel_error <= REL_TOL

    @property
    def ledger_matches(self) -> bool:
        return all(abs(self.ledger[k] - self.formula[k]) < BYTE_TOL for k in self.formula)

    @property
    def ok(self) -> bool:
        return self.equivalent and self.ledger_matches

    @property
    def name(self) -> str:
        bucket = "" if self.layout.head_bucket is None else f" Bh={self.layout.head_bucket}"
        return f"{self.layout.label} D={self.layout.degree} n_kv={self.kv_heads}{bucket}"


def formula_split(config: ModelConfig, layout: StrategyLayout, workload: Workload) -> dict[str, float]:
    """Forward cost-model terms keyed like the ledger categories."""
    report = comm_volume(config, layout, workload.batch_size, workload.seq_len, Phase.FWD)
    return {
        Category.WEIGHT_MOVEMENT.value: report.weight,
        Category.ACTIVATION_EXCHANGE.value: report.activation,
        "total": report.total,
    }


def ledger_split(result: PassResult) -> dict[str, float]:
    out = {c: result.ledger.per_device(Category(c)) for c in (Category.WEIGHT_MOVEMENT.value, Category.ACTIVATION_EXCHANGE.value)}
    out["total"] = result.ledger.per_device()
    return out


def evaluate(layout: StrategyLayout, config: ModelConfig, workload: Workload, seed: int) -> Cell:
    result = run_layer(layout, config, workload, seed)
    return Cell(layout, config.num_kv_heads, result.rel_error, ledger_split(result), formula_split(config, layout, workload))


def layouts_for(degree: int, config: ModelConfig, buckets: bool = True) -> Iterator[StrategyLayout]:
    yield StrategyLayout(Strategy.DP, degree)
    yield StrategyLayout(Strategy.TP, degree)
    yield StrategyLayout(Strategy.SP, degree)
    for t in range(1, degree + 1):
        if degree % t == 0:
            yield StrategyLayout.tpsp(t, degree // t)
    heads = config.num_heads // degree
    if buckets:
        for b in range(1, heads + 1):
            if heads % b == 0:
                yield StrategyLayout(Strategy.TSP, degree, head_bucket=b)
    else:
        yield StrategyLayout(Strategy.TSP, degree)


def verify_matrix(scale: str, seed: int, degrees: tuple[int, ...] = DEGREES) -> list[Cell]:
    preset = SCALES[scale]
    cells = []
    for kv_heads in (preset.heads, preset.heads // 2):
        config = preset.model(kv_heads)
        for degree in degrees:
            for layout in layouts_for(degree, config):
                cells.append(evaluate(layout, config, preset.workload(), seed))
    return cells
