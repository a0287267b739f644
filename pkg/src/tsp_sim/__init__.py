"""Deterministic multi-rank simulator and cost model for folded tensor-sequence parallelism."""

from tsp_sim.config import (
    ModelConfig,
    Phase,
    Recompute,
    RunConfig,
    Strategy,
    StrategyLayout,
    Workload,
)

__all__ = [
    "ModelConfig",
    "Phase",
    "Recompute",
    "RunConfig",
    "Strategy",
    "StrategyLayout",
    "Workload",
]

__version__ = "0.1.0"
