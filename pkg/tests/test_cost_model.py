import random
from dataclasses import replace

import pytest

from tsp_sim.config import ModelConfig, Phase, Recompute, Strategy, StrategyLayout
from tsp_sim.cost_model import (
    UPPER_BOUND,
    activation_memory,
    comm_volume,
    comparison_layouts,
    crossover,
    flops,
    layer_flops,
    memory_breakdown,
    param_count,
    recompute_overhead,
    tsp_vs_sp,
    tsp_wins_asymptotic,
)

BIG = ModelConfig()  # 7B reference: h=4096, L=32, n_h=32, g=1, F=4
H2 = 4096**2


def table_ii(cfg, layout, B, S, phase):
    """Independent transcription of the per-strategy volume table, summed over categories."""
    h, g, D = cfg.hidden_size, cfg.gqa_ratio, layout.degree
    bp, bg = cfg.param_bytes, cfg.grad_bytes
    r = (D - 1) / D
    k = {Phase.FWD: 1, Phase.FWD_BWD: 2, Phase.FWD_BWD_RECOMP: 3}[phase]
    p_attn = 2 * (1 + 1 / g) * h * h
    p_mlp = 3 * cfg.ffn_factor * h * h
    p_l = p_attn + p_mlp
    bsh = B * S * h * bp
    train = phase is not Phase.FWD
    s = layout.strategy
    if s is Strategy.DP:
        return 2 * p_l * bg * r if train else 0
    if s is Strategy.TP:
        return 4 * k * bsh * r
    if s is Strategy.SP:
        return 2 * k * bsh * r / g + (2 * p_l * bg * r if train else 0)
    if s is Strategy.TSP:
        grad = {Phase.FWD: 0, Phase.FWD_BWD: p_l * bg * r, Phase.FWD_BWD_RECOMP: 2 * p_l * bg * r}[phase]
        return k * (p_attn * bp + p_mlp * bp * r) + 2 * k * bsh * r / g + grad
    T, Sg = layout.tp_degree, layout.sp_degree
    rs, rt = (Sg - 1) / Sg, (T - 1) / T
    return 2 * k * bsh * rs / (g * T) + 4 * k * bsh * rt / Sg + (2 * p_l * bg * rs / T if train else 0)


def random_point(rng):
    g = rng.choice([1, 2, 4, 8])
    heads = rng.choice([8, 16, 32, 64])
    cfg = ModelConfig(
        hidden_size=heads * rng.choice([64, 128]),
        num_layers=rng.randint(1, 8),
        num_heads=heads,
        num_kv_heads=heads // g,
        ffn_factor=rng.choice([1, 2, 4]),
        param_bytes=rng.choice([1, 2, 4]),
        grad_bytes=rng.choice([2, 4]),
    )
    D = rng.choice([1, 2, 4, 8, 16, 64])
    T = rng.choice([t for t in range(1, D + 1) if D % t == 0])
    layout = rng.choice(
        [StrategyLayout(s, D) for s in (Strategy.DP, Strategy.TP, Strategy.SP, Strategy.TSP)]
        + [StrategyLayout.tpsp(T, D // T)]
    )
    return cfg, layout, rng.randint(1, 16), rng.choice([512, 4096, 32768]), rng.choice(list(Phase))


def test_matches_table_on_random_points():
    rng = random.Random(1234)
    for _ in range(200):
        cfg, layout, B, S, phase = random_point(rng)
        got = comm_volume(cfg, layout, B, S, phase).total
        assert got == pytest.approx(table_ii(cfg, layout, B, S, phase), rel=1e-12, abs=1e-6)


def test_param_count_reference():
    p = param_count(BIG)
    assert p.per_layer == 16 * H2 == 268_435_456
    assert p.total == 8_589_934_592
    gqa = replace(BIG, num_kv_heads=4)
    assert param_count(gqa).attention == 37_748_736


def test_activation_memory():
    sel = activation_memory(BIG, 1, 8192, Recompute.SELECTIVE)
    assert sel == 36_507_222_016
    assert activation_memory(BIG, 1, 8192, Recompute.FULL) * 17 == sel
    none = activation_memory(BIG, 1, 8192, Recompute.NONE)
    assert none - sel == 32 * 8192**2 * 32 * 5


def test_memory_breakdown_reference():
    mem = {lay.label: memory_breakdown(BIG, lay, 1, 8192, Recompute.SELECTIVE) for lay in comparison_layouts()}
    assert mem["DP"].weight_proportional == 8_589_934_592 * 16
    assert mem["TSP"].total == (mem["DP"].weight_proportional + 36_507_222_016) / 8
    assert min(mem, key=lambda k: mem[k].total) == "TSP"
    big = {lay.label: memory_breakdown(BIG, lay, 1, 65536, Recompute.SELECTIVE).total for lay in comparison_layouts()}
    assert big["DP"] > 192e9 and big["TP"] > 192e9
    assert big["SP"] < 192e9 and big["TSP"] < 192e9


def test_comm_reference_points():
    tp = comm_volume(BIG, StrategyLayout(Strategy.TP, 8), 1, 32768)
    assert tp.total == 939_524_096
    tsp = comm_volume(BIG, StrategyLayout(Strategy.TSP, 8), 1, 32768)
    assert (tsp.weight, tsp.activation) == (486_539_264, 469_762_048)
    assert tsp.total / tp.total == pytest.approx(1.018, abs=1e-3)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_degree_one_vanishes(strategy):
    layout = StrategyLayout.tpsp(1, 1) if strategy is Strategy.TPSP else StrategyLayout(strategy, 1)
    for phase in Phase:
        rep = comm_volume(BIG, layout, 2, 4096, phase)
        expected = param_count(BIG).attention * BIG.param_bytes * {Phase.FWD: 1, Phase.FWD_BWD: 2, Phase.FWD_BWD_RECOMP: 3}[phase]
        assert rep.total == (expected if strategy is Strategy.TSP else 0)


def test_tsp_gradient_options():
    lay = StrategyLayout(Strategy.TSP, 8)
    printed = comm_volume(BIG, lay, 1, 4096, Phase.FWD_BWD)
    upper = comm_volume(BIG, lay, 1, 4096, Phase.FWD_BWD, UPPER_BOUND)
    assert upper.gradient == 2 * printed.gradient
    with pytest.raises(ValueError):
        comm_volume(BIG, lay, 1, 4096, Phase.FWD_BWD, "other")


def test_tp_gradient_note():
    rep = comm_volume(BIG, StrategyLayout(Strategy.TP, 8), 1, 4096, Phase.FWD_BWD)
    assert rep.gradient == 0 and rep.notes


def test_monotone_in_tokens():
    for lay in comparison_layouts():
        vols = [comm_volume(BIG, lay, 1, s).total for s in (1024, 2048, 4096)]
        assert vols == sorted(vols)
        mems = [memory_breakdown(BIG, lay, 1, s, Recompute.SELECTIVE).total for s in (1024, 2048, 4096)]
        assert mems == sorted(mems) and mems[0] < mems[-1]


def test_gqa_halves_sp_tsp_activation():
    g2 = replace(BIG, num_kv_heads=16)
    for s in (Strategy.SP, Strategy.TSP):
        a1 = comm_volume(BIG, StrategyLayout(s, 8), 1, 8192).activation
        a2 = comm_volume(g2, StrategyLayout(s, 8), 1, 8192).activation
        assert a2 * 2 == a1


def test_flops():
    f = layer_flops(BIG, 1, 8192)
    assert f.attention == 2_199_023_255_552
    assert f.mlp == 24 * 8192 * H2
    per = {s: flops(BIG, StrategyLayout(s, 8), 1, 8192).total for s in (Strategy.TP, Strategy.SP, Strategy.TSP)}
    assert len(set(per.values())) == 1
    assert flops(BIG, StrategyLayout(Strategy.DP, 8), 1, 8192).total == 8 * per[Strategy.TP]
    assert flops(BIG, StrategyLayout.tpsp(2, 4), 1, 8192).total == per[Strategy.TP]
    f2 = layer_flops(BIG, 1, 16384)
    sq = 4 * 8192**2 * 4096
    assert f2.attention - 4 * sq == 2 * (f.attention - sq)


def test_crossover_predicate():
    assert not tsp_wins_asymptotic(BIG, 1, 8192)
    assert tsp_wins_asymptotic(BIG, 4, 16384)
    assert not tsp_wins_asymptotic(BIG, 1, 32768)  # BS == 8h, strict inequality
    c = crossover(BIG, 1, 32768, 8)
    assert c.ratio == pytest.approx(1.018, abs=1e-3) and not c.exact_tsp_wins


def test_crossover_gqa_shift():
    g2 = replace(BIG, num_kv_heads=16)
    # P_L = 15h^2 and the threshold is 2BSh*1.5, so BS > 5h
    assert not tsp_wins_asymptotic(g2, 1, 5 * 4096)
    assert tsp_wins_asymptotic(g2, 1, 5 * 4096 + 1)


def test_tsp_vs_sp():
    d = tsp_vs_sp(BIG, 1, 8192, 8)
    assert d.difference == 973_078_528
    assert tsp_vs_sp(BIG, 4, 65536, 8).difference == d.difference
    assert tsp_vs_sp(BIG, 1, 8192, 1).difference == 2 * param_count(BIG).attention * 2


def test_recompute_overhead():
    for D in (2, 4, 8, 64):
        assert recompute_overhead(BIG, StrategyLayout(Strategy.TP, D), 1, 4096) == 1.5
        assert recompute_overhead(BIG, StrategyLayout(Strategy.DP, D), 1, 4096) == 1.0
    sp = recompute_overhead(BIG, StrategyLayout(Strategy.SP, 8), 1, 32768)
    assert 1.0 < sp < 1.5
    assert recompute_overhead(BIG, StrategyLayout(Strategy.DP, 1), 1, 4096) == 1.0
