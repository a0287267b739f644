"""Closed-form parameter, memory, communication and FLOP model for DP/TP/SP/TP+SP/TSP.

All byte quantities are per layer per device unless a name says otherwise.
Communication terms are evaluated as exact rationals and converted to float
at the end, so ratios between phases or strategies are exact. Embedding,
positional and norm parameters are ignored throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

from tsp_sim.config import ModelConfig, Phase, Recompute, Strategy, StrategyLayout

GB = 1e9

PRINTED = "printed"
UPPER_BOUND = "upper_bound"
GRADIENT_ACCOUNTINGS = (PRINTED, UPPER_BOUND)


class ParamCount(NamedTuple):
    attention: int
    mlp: int
    per_layer: int
    total: int


def param_count(config: ModelConfig) -> ParamCount:
    """Q/O at ``h x h``, K/V at ``h/g x h``, three ``F*h x h`` MLP matrices."""
    h = config.hidden_size
    attn = 2 * h * h + 2 * config.kv_dim * h
    mlp = 3 * config.ffn_dim * h
    per_layer = attn + mlp
    return ParamCount(attn, mlp, per_layer, config.num_layers * per_layer)


def activation_memory(config: ModelConfig, batch: int, seq_len: int, recompute: Recompute) -> float:
    """Full-model activation bytes before any parallel division."""
    beta = config.param_bytes
    base = config.num_layers * batch * seq_len * config.hidden_size
    recompute = Recompute(recompute)
    if recompute is Recompute.FULL:
        return float(base * beta)
    selective = base * (16 * beta + 2)
    if recompute is Recompute.SELECTIVE:
        return float(selective)
    # retained attention probabilities: L*B*S^2*n_h*(2*beta + 1)
    return float(selective + config.num_layers * batch * seq_len * seq_len * config.num_heads * (2 * beta + 1))


@dataclass(frozen=True)
class MemoryReport:
    params: float
    grads: float
    optimizer: float
    activations: float

    @property
    def weight_proportional(self) -> float:
        return self.params + self.grads + self.optimizer

    @property
    def total(self) -> float:
        return self.params + self.grads + self.optimizer + self.activations


def memory_breakdown(
    config: ModelConfig, layout: StrategyLayout, batch: int, seq_len: int, recompute: Recompute
) -> MemoryReport:
    """Per-device memory: weight terms divided by the weight-shard factor, activations by the sequence-shard factor."""
    n = param_count(config).total
    w, s = layout.split
    return MemoryReport(
        params=n * config.param_bytes / w,
        grads=n * config.grad_bytes / w,
        optimizer=n * config.optimizer_states * config.optimizer_bytes / w,
        activations=activation_memory(config, batch, seq_len, recompute) / s,
    )


@dataclass(frozen=True)
class CommReport:
    activation: float
    weight: float
    gradient: float
    notes: tuple[str, ...] = field(default=())

    @property
    def total(self) -> float:
        return self.activation + self.weight + self.gradient


_PASSES = {Phase.FWD: 1, Phase.FWD_BWD: 2, Phase.FWD_BWD_RECOMP: 3}


def _ring(x: Fraction, n: int) -> Fraction:
    return x * (n - 1) / n


def comm_volume(
    config: ModelConfig,
    layout: StrategyLayout,
    batch: int,
    seq_len: int,
    phase: Phase = Phase.FWD,
    tsp_gradient: str = PRINTED,
) -> CommReport:
    """Per-layer, per-device communication volume split into activation/weight/gradient terms.

    ``phase`` selects forward only, forward+backward, or forward+backward with
    the forward communication repeated for recomputation. ``tsp_gradient``
    picks the TSP fwd+bwd gradient coefficient: ``"printed"`` charges
    ``P_L*beta_g*(D-1)/D`` (a reduce-to-owner), ``"upper_bound"`` charges the
    all-reduce-sized ``2*P_L*beta_g*(D-1)/D``. The recomputation variant
    always uses the 2x coefficient.
    """
    if tsp_gradient not in GRADIENT_ACCOUNTINGS:
        raise ValueError(f"tsp_gradient must be one of {GRADIENT_ACCOUNTINGS}, got {tsp_gradient!r}")
    phase = Phase(phase)
    act, weight, grad, notes = _exact_comm(config, layout, batch, seq_len, phase, tsp_gradient)
    return CommReport(float(act), float(weight), float(grad), notes)


def _exact_comm(
    config: ModelConfig, layout: StrategyLayout, batch: int, seq_len: int, phase: Phase, tsp_gradient: str
) -> tuple[Fraction, Fraction, Fraction, tuple[str, ...]]:
    """(activation, weight, gradient, notes) as exact rationals."""
    k = _PASSES[phase]
    zero = Fraction(0)
    params = param_count(config)
    bp, bg, g = Fraction(config.param_bytes), Fraction(config.grad_bytes), config.gqa_ratio
    act = batch * seq_len * config.hidden_size * bp  # B*S*h*beta_P
    grad_allreduce = 2 * params.per_layer * bg
    training = phase is not Phase.FWD
    D = layout.degree
    strategy = layout.strategy

    if strategy is Strategy.DP:
        return zero, zero, _ring(grad_allreduce, D) if training else zero, ()

    if strategy is Strategy.TP:
        notes = ("TP lists no gradient synchronization term; gradients are sharded along the TP axis",) if training else ()
        return _ring(4 * k * act, D), zero, zero, notes

    if strategy is Strategy.SP:
        return _ring(2 * k * act / g, D), zero, _ring(grad_allreduce, D) if training else zero, ()

    if strategy is Strategy.TSP:
        weight = k * (params.attention * bp + _ring(params.mlp * bp, D))
        if not training:
            gradient = zero
        elif phase is Phase.FWD_BWD and tsp_gradient == PRINTED:
            gradient = _ring(params.per_layer * bg, D)
        else:
            gradient = _ring(grad_allreduce, D)
        return _ring(2 * k * act / g, D), weight, gradient, ()

    T, Sg = layout.tp_degree, layout.sp_degree
    activation = _ring(2 * k * act / (g * T), Sg) + _ring(4 * k * act / Sg, T)
    return activation, zero, _ring(grad_allreduce / T, Sg) if training else zero, ()


@dataclass(frozen=True)
class FlopsReport:
    attention: float
    mlp: float

    @property
    def total(self) -> float:
        return self.attention + self.mlp


def layer_flops(config: ModelConfig, batch: int, seq_len: int) -> FlopsReport:
    """Leading-order forward FLOPs of one unsharded layer (pointwise ops ignored)."""
    h, g = config.hidden_size, config.gqa_ratio
    bs = batch * seq_len
    # 4(1 + 1/g) B S h^2 written over integers: 4 B S h (h + h/g)
    attn = 4 * bs * h * (h + config.kv_dim) + 4 * bs * seq_len * h
    mlp = 6 * config.ffn_factor * bs * h * h
    return FlopsReport(float(attn), float(mlp))


def flops(config: ModelConfig, layout: StrategyLayout, batch: int, seq_len: int) -> FlopsReport:
    """Per-device forward FLOPs: the layer total divided by the model-parallel degree."""
    full = layer_flops(config, batch, seq_len)
    div = 1 if layout.strategy is Strategy.DP else layout.degree
    return FlopsReport(full.attention / div, full.mlp / div)


def _exact_total(config: ModelConfig, layout: StrategyLayout, batch: int, seq_len: int, phase: Phase) -> Fraction:
    act, weight, grad, _ = _exact_comm(config, layout, batch, seq_len, phase, PRINTED)
    return act + weight + grad


class Crossover(NamedTuple):
    ratio: float
    tsp_wins: bool
    exact_tsp_wins: bool


def tsp_wins_asymptotic(config: ModelConfig, batch: int, seq_len: int) -> bool:
    """Large-D predicate ``P_L < 2 B S h (2 - 1/g)``."""
    g = config.gqa_ratio
    # both sides scaled by g to stay in integers
    return param_count(config).per_layer * g < 2 * batch * seq_len * config.hidden_size * (2 * g - 1)


def crossover(config: ModelConfig, batch: int, seq_len: int, degree: int) -> Crossover:
    """TSP/TP forward-volume ratio at finite ``degree`` plus the asymptotic predicate."""
    tsp = _exact_total(config, StrategyLayout(Strategy.TSP, degree), batch, seq_len, Phase.FWD)
    tp = _exact_total(config, StrategyLayout(Strategy.TP, degree), batch, seq_len, Phase.FWD)
    ratio = float(tsp / tp) if tp else float("inf")
    return Crossover(ratio, tsp_wins_asymptotic(config, batch, seq_len), ratio < 1)


@dataclass(frozen=True)
class TspVsSp:
    tsp_total: float
    sp_total: float
    weight_delta: float
    gradient_delta: float

    @property
    def difference(self) -> float:
        return self.tsp_total - self.sp_total


def tsp_vs_sp(
    config: ModelConfig, batch: int, seq_len: int, degree: int, tsp_gradient: str = UPPER_BOUND
) -> TspVsSp:
    """Compare fwd+bwd training volume; activation terms cancel, leaving weight movement and gradient accounting."""
    tsp = comm_volume(config, StrategyLayout(Strategy.TSP, degree), batch, seq_len, Phase.FWD_BWD, tsp_gradient)
    sp = comm_volume(config, StrategyLayout(Strategy.SP, degree), batch, seq_len, Phase.FWD_BWD)
    return TspVsSp(tsp.total, sp.total, tsp.weight - sp.weight, tsp.gradient - sp.gradient)


def recompute_overhead(config: ModelConfig, layout: StrategyLayout, batch: int, seq_len: int) -> float:
    """``C[fwd+bwd+recomp] / C[fwd+bwd]``; 1.0 when neither phase communicates."""
    base = _exact_total(config, layout, batch, seq_len, Phase.FWD_BWD)
    recomp = _exact_total(config, layout, batch, seq_len, Phase.FWD_BWD_RECOMP)
    if base == 0:
        return 1.0 if recomp == 0 else float("inf")
    return float(recomp / base)


def comparison_layouts(degree: int = 8, tp_degree: int = 2, sp_degree: int = 4) -> list[StrategyLayout]:
    """The five strategies compared on one node: DP, TP, SP, TP+SP grid, TSP."""
    return [
        StrategyLayout(Strategy.DP, degree),
        StrategyLayout(Strategy.TP, degree),
        StrategyLayout(Strategy.SP, degree),
        StrategyLayout.tpsp(tp_degree, sp_degree),
        StrategyLayout(Strategy.TSP, degree),
    ]
