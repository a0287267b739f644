"""``tsp-sim`` command-line front end.

Subcommands emit plot-ready tables (CSV or JSON) with a fixed column order.
Exit codes: 0 success, 1 validation failure, 2 verification failure, 3 I/O
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import replace
from typing import Any, Callable, Sequence

import numpy as np

from tsp_sim.collectives import CATEGORIES
from tsp_sim.config import ConfigError, ModelConfig, Phase, Recompute, RunConfig, RunSettings, Strategy, StrategyLayout
from tsp_sim.config import default_run_config
from tsp_sim.cost_model import (
    GB,
    GRADIENT_ACCOUNTINGS,
    PRINTED,
    comm_volume,
    comparison_layouts,
    crossover,
    flops,
    memory_breakdown,
    param_count,
)
from tsp_sim.sharding import ShardingError
from tsp_sim.verify import SCALES, formula_split, ledger_split, verify_matrix

EXIT_OK, EXIT_VALIDATION, EXIT_VERIFICATION, EXIT_IO = 0, 1, 2, 3

SWEEP_KEYS = ("seq-len", "batch", "hidden", "degree")


class ValidationError(ValueError):
    """Bad command-line input."""


# formatting


def exact(x: float) -> int | float:
    """Integral values as ints, anything else rounded to 2 decimals."""
    x = float(x)
    return int(x) if x.is_integer() else round(x, 2)


def gb(x: float) -> float:
    return round(float(x) / GB, 2)


class Table:
    def __init__(self, kind: str, columns: Sequence[str], units: dict[str, str] | None = None) -> None:
        self.kind = kind
        self.columns = list(columns)
        self.units = units or {}
        self.rows: list[dict[str, Any]] = []

    def add(self, **row: Any) -> None:
        missing = set(self.columns) ^ set(row)
        if missing:
            raise KeyError(f"row columns differ from schema: {sorted(missing)}")
        self.rows.append({c: row[c] for c in self.columns})

    def render(self, fmt: str) -> str:
        if fmt == "json":
            doc = {"kind": self.kind, "columns": self.columns, "units": self.units, "rows": self.rows}
            return json.dumps(doc, indent=2) + "\n"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow(["" if row[c] is None else _csv_cell(row[c]) for c in self.columns])
        return buf.getvalue()


def _csv_cell(value: Any) -> Any:
    if isinstance(value, bool):
        return str(value).lower()
    return value


def emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)


# ranges


def parse_range(spec: str) -> list[int]:
    """``N``, ``a,b,c``, ``start:stop:xK`` (geometric) or ``start:stop:+K`` (arithmetic); stop is inclusive."""
    try:
        if ":" not in spec:
            values = [int(v) for v in spec.split(",")]
        else:
            start_s, stop_s, step_s = spec.split(":")
            start, stop = int(start_s), int(stop_s)
            step = int(step_s[1:])
            if step_s[0] == "x":
                if step < 2:
                    raise ValidationError(f"geometric step must be >= 2 in {spec!r}")
                values = []
                v = start
                while v <= stop:
                    values.append(v)
                    v *= step
            elif step_s[0] == "+":
                if step < 1:
                    raise ValidationError(f"arithmetic step must be >= 1 in {spec!r}")
                values = list(range(start, stop + 1, step))
            else:
                raise ValidationError(f"step must start with 'x' or '+' in {spec!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad range {spec!r}: expected N, a,b,c, start:stop:xK or start:stop:+K") from None
    if not values or any(v <= 0 for v in values):
        raise ValidationError(f"range {spec!r} must contain positive values only and be non-empty")
    return values


# config plumbing


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_run_config()
    run = cfg.run
    run = RunSettings(
        seed=run.seed if args.seed is None else args.seed,
        format=run.format if args.format is None else args.format,
        out=run.out if args.out is None else args.out,
    )
    return replace(cfg, run=run)


def with_hidden(model: ModelConfig, hidden: int) -> ModelConfig:
    """Rescale the width keeping head dimension and GQA ratio."""
    d, g = model.head_dim, model.gqa_ratio
    if hidden % d:
        raise ValidationError(f"hidden={hidden} is not a multiple of head_dim={d}")
    heads = hidden // d
    if heads % g:
        raise ValidationError(f"hidden={hidden} gives {heads} heads, not divisible by GQA ratio {g}")
    return replace(model, hidden_size=hidden, num_heads=heads, num_kv_heads=heads // g)


def with_kv_groups(model: ModelConfig, g: int) -> ModelConfig:
    if model.num_heads % g:
        raise ValidationError(f"num_heads={model.num_heads} is not divisible by kv-groups {g}")
    return replace(model, num_kv_heads=model.num_heads // g)


def analysis_layouts(degree: int, tp_degree: int) -> list[StrategyLayout]:
    """DP/TP/SP/TPSP/TSP at ``degree``; TPSP is skipped when ``tp_degree`` does not divide it."""
    layouts = comparison_layouts(degree, 1, degree)
    if degree % tp_degree:
        return [lay for lay in layouts if lay.strategy is not Strategy.TPSP]
    layouts[3] = StrategyLayout.tpsp(tp_degree, degree // tp_degree)
    return layouts


def _layout_columns(layout: StrategyLayout) -> dict[str, Any]:
    return {
        "strategy": layout.label,
        "degree": layout.degree,
        "weight_shards": layout.weight_shards,
        "seq_shards": layout.seq_shards,
    }


# analyze

_BASE_COLUMNS = ["sweep_key", "sweep_value", "strategy", "degree", "weight_shards", "seq_shards", "batch_size", "seq_len", "hidden_size"]

MEMORY_COLUMNS = _BASE_COLUMNS + [
    "recompute",
    "total_params",
    "params_bytes",
    "grads_bytes",
    "optimizer_bytes",
    "activations_bytes",
    "total_bytes",
    "total_gb",
    "exceeds_capacity",
]
COMM_COLUMNS = _BASE_COLUMNS + [
    "phase",
    "activation_bytes",
    "weight_bytes",
    "gradient_bytes",
    "total_bytes",
    "total_gb",
    "notes",
]
FLOPS_COLUMNS = _BASE_COLUMNS + ["attention_flops", "mlp_flops", "total_flops"]

_UNITS = {
    "memory": {"*_bytes": "bytes per device (whole model)", "total_gb": "1e9 bytes", "total_params": "parameters"},
    "comm": {"*_bytes": "bytes per device per layer", "total_gb": "1e9 bytes"},
    "flops": {"*_flops": "forward FLOPs per device per layer"},
}


def _analyze_row(kind: str, table: Table, args: argparse.Namespace, cfg: RunConfig, model: ModelConfig,
                 layout: StrategyLayout, batch: int, seq_len: int, sweep_value: int) -> None:
    common = {
        "sweep_key": args.sweep_key,
        "sweep_value": sweep_value,
        **_layout_columns(layout),
        "batch_size": batch,
        "seq_len": seq_len,
        "hidden_size": model.hidden_size,
    }
    if kind == "memory":
        rep = memory_breakdown(model, layout, batch, seq_len, cfg.workload.recompute)
        table.add(
            **common,
            recompute=cfg.workload.recompute.value,
            total_params=param_count(model).total,
            params_bytes=exact(rep.params),
            grads_bytes=exact(rep.grads),
            optimizer_bytes=exact(rep.optimizer),
            activations_bytes=exact(rep.activations),
            total_bytes=exact(rep.total),
            total_gb=gb(rep.total),
            exceeds_capacity=rep.total > args.capacity_gb * GB,
        )
    elif kind == "comm":
        rep = comm_volume(model, layout, batch, seq_len, cfg.workload.phase, args.tsp_gradient)
        table.add(
            **common,
            phase=cfg.workload.phase.value,
            activation_bytes=exact(rep.activation),
            weight_bytes=exact(rep.weight),
            gradient_bytes=exact(rep.gradient),
            total_bytes=exact(rep.total),
            total_gb=gb(rep.total),
            notes="; ".join(rep.notes),
        )
    else:
        rep = flops(model, layout, batch, seq_len)
        table.add(
            **common,
            attention_flops=exact(rep.attention),
            mlp_flops=exact(rep.mlp),
            total_flops=exact(rep.total),
        )


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    workload = cfg.workload
    if args.batch is not None:
        workload = replace(workload, batch_size=args.batch)
    if args.recompute is not None:
        workload = replace(workload, recompute=Recompute(args.recompute))
    if args.phase is not None:
        workload = replace(workload, phase=Phase(args.phase))
    cfg = replace(cfg, workload=workload)
    model = cfg.model if args.kv_groups is None else with_kv_groups(cfg.model, args.kv_groups)
    degree = args.degree if args.degree is not None else cfg.layout.degree
    tp = args.tp_degree
    if tp is None:
        tp = cfg.layout.tp_degree if cfg.layout.strategy is Strategy.TPSP else 2

    if args.sweep and args.seq_len:
        raise ValidationError("--seq-len and --sweep are mutually exclusive")
    if args.sweep:
        key, spec = args.sweep
        if key not in SWEEP_KEYS:
            raise ValidationError(f"--sweep key must be one of {SWEEP_KEYS}, got {key!r}")
        values = parse_range(spec)
    elif args.seq_len:
        key, values = "seq-len", list(args.seq_len)
    else:
        key, values = "seq-len", [workload.seq_len]
    args.sweep_key = key

    table = Table(args.kind, {"memory": MEMORY_COLUMNS, "comm": COMM_COLUMNS, "flops": FLOPS_COLUMNS}[args.kind], _UNITS[args.kind])
    for value in sorted(set(values)):
        m, d, b, s = model, degree, workload.batch_size, workload.seq_len
        if key == "seq-len":
            s = value
        elif key == "batch":
            b = value
        elif key == "hidden":
            m = with_hidden(model, value)
        else:
            d = value
        for layout in analysis_layouts(d, tp):
            _analyze_row(args.kind, table, args, cfg, m, layout, b, s, value)
    emit(table.render(cfg.run.format), cfg.run.out)
    return EXIT_OK


# crossover

CROSSOVER_COLUMNS = ["batch_size", "seq_len", "tokens", "ratio", "tsp_wins", "exact_tsp_wins", "boundary"]


def crossover_table(model: ModelConfig, degree: int, batches: Sequence[int], seqs: Sequence[int]) -> Table:
    """Grid of TSP/TP forward-volume ratios; ``boundary`` marks cells with a grid neighbour across the predicate."""
    batches, seqs = sorted(set(batches)), sorted(set(seqs))
    grid = {(i, j): crossover(model, b, s, degree) for i, b in enumerate(batches) for j, s in enumerate(seqs)}
    table = Table("crossover", CROSSOVER_COLUMNS, {"tokens": "B*S", "ratio": "TSP fwd bytes / TP fwd bytes"})
    for (i, j), cell in grid.items():
        neighbours = [grid.get(n) for n in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))]
        boundary = any(n is not None and n.tsp_wins != cell.tsp_wins for n in neighbours)
        b, s = batches[i], seqs[j]
        table.add(
            batch_size=b,
            seq_len=s,
            tokens=b * s,
            ratio=cell.ratio,
            tsp_wins=cell.tsp_wins,
            exact_tsp_wins=cell.exact_tsp_wins,
            boundary=boundary,
        )
    return table


def cmd_crossover(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model = cfg.model
    if args.kv_groups is not None:
        model = with_kv_groups(model, args.kv_groups)
    if args.hidden is not None:
        model = with_hidden(model, args.hidden)
    degree = args.degree if args.degree is not None else cfg.layout.degree
    if degree < 1:
        raise ValidationError(f"--degree must be positive, got {degree}")
    table = crossover_table(model, degree, parse_range(args.batch), parse_range(args.seq_len))
    emit(table.render(cfg.run.format), cfg.run.out)
    return EXIT_OK


# verify

VERIFY_COLUMNS = [
    "strategy",
    "degree",
    "weight_shards",
    "seq_shards",
    "num_kv_heads",
    "head_bucket",
    "rel_error",
    "ledger_weight_bytes",
    "formula_weight_bytes",
    "ledger_activation_bytes",
    "formula_activation_bytes",
    "status",
]


def cmd_verify(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed
    fmt = args.format or "csv"
    cells = verify_matrix(args.scale, seed)
    table = Table("verify", VERIFY_COLUMNS, {"*_bytes": "bytes per device per layer", "rel_error": "max|out-ref|/max|ref|"})
    for c in cells:
        table.add(
            **_layout_columns(c.layout),
            num_kv_heads=c.kv_heads,
            head_bucket=c.layout.head_bucket,
            rel_error=c.rel_error,
            ledger_weight_bytes=exact(c.ledger["weight_movement"]),
            formula_weight_bytes=exact(c.formula["weight_movement"]),
            ledger_activation_bytes=exact(c.ledger["activation_exchange"]),
            formula_activation_bytes=exact(c.formula["activation_exchange"]),
            status="pass" if c.ok else "fail",
        )
    emit(table.render(fmt), args.out)
    failed = [c for c in cells if not c.ok]
    for c in failed:
        reason = "error" if not c.equivalent else "ledger"
        print(f"FAIL {c.name}: {reason} (rel_error={c.rel_error:.3e})", file=sys.stderr)
    print(f"verify {args.scale} seed={seed}: {len(cells) - len(failed)}/{len(cells)} cells pass", file=sys.stderr)
    return EXIT_VERIFICATION if failed else EXIT_OK


# simulate


def _checksum(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array, dtype="<f8").tobytes()).hexdigest()


SIMULATE_COLUMNS = ["rank"] + [c.value for c in CATEGORIES] + ["total"]


def cmd_simulate(args: argparse.Namespace) -> int:
    from tsp_sim.schedules import run_layer

    cfg = load_config(args)
    if args.scale is not None:
        preset = SCALES[args.scale]
        model = preset.model(preset.heads // cfg.model.gqa_ratio, cfg.model)
        cfg = replace(
            cfg, model=model, workload=replace(cfg.workload, batch_size=preset.batch, seq_len=preset.seq_len)
        )
    if args.strategy is not None or args.degree is not None or args.head_bucket is not None:
        layout = cfg.layout
        strategy = Strategy(args.strategy) if args.strategy else layout.strategy
        if strategy is Strategy.TPSP:
            tp = args.tp_degree or layout.tp_degree
            sp = args.sp_degree or layout.sp_degree
            if tp is None or sp is None:
                raise ValidationError("TPSP needs --tp-degree and --sp-degree")
            layout = StrategyLayout.tpsp(tp, sp)
        else:
            degree = args.degree if args.degree is not None else layout.degree
            layout = StrategyLayout(strategy, degree, head_bucket=args.head_bucket)
        cfg = replace(cfg, layout=layout)
    if args.dump_config:
        cfg.dump(args.dump_config)

    result = run_layer(cfg.layout, cfg.model, cfg.workload, cfg.run.seed)
    ledger = result.ledger
    per_rank = [
        {"rank": r, **{c.value: exact(ledger.rank_bytes(r, c)) for c in CATEGORIES}, "total": exact(ledger.rank_bytes(r))}
        for r in range(ledger.world_size)
    ]
    formula = formula_split(cfg.model, cfg.layout, cfg.workload)
    measured = ledger_split(result)
    report = {
        "kind": "simulate",
        "config": {**cfg.to_dict(), "run": {"seed": cfg.run.seed}},
        "layout": cfg.layout.label,
        "simulated_phase": Phase.FWD.value,
        "per_rank": per_rank,
        "per_device": {c.value: exact(ledger.per_device(c)) for c in CATEGORIES},
        "per_device_total": exact(ledger.per_device()),
        "formula_per_device": {k: exact(v) for k, v in formula.items()},
        "ledger_matches_formula": all(abs(measured[k] - formula[k]) < 1 for k in formula),
        "num_calls": len(ledger.calls),
        "output_sha256": _checksum(result.assembled),
        "max_abs_error": result.max_abs_error,
        "rel_error": result.rel_error,
    }
    if cfg.run.format == "json":
        text = json.dumps(report, indent=2) + "\n"
    else:
        table = Table("simulate", SIMULATE_COLUMNS + ["output_sha256", "rel_error"])
        for row in per_rank:
            table.add(**row, output_sha256=report["output_sha256"], rel_error=report["rel_error"])
        text = table.render("csv")
    emit(text, cfg.run.out)
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file (defaults to the shipped 7B configuration)")
    common.add_argument("--format", choices=("csv", "json"), help="output format")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int, help="RNG seed")

    parser = argparse.ArgumentParser(prog="tsp-sim", description="TSP/TP/SP/DP simulator and cost model")
    sub = parser.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analyze", parents=[common], help="memory, communication or FLOP tables per strategy")
    an.add_argument("kind", choices=("memory", "comm", "flops"))
    an.add_argument("--seq-len", type=int, action="append", help="sequence length (repeatable)")
    an.add_argument("--sweep", nargs=2, metavar=("KEY", "RANGE"), help=f"sweep one of {', '.join(SWEEP_KEYS)}")
    an.add_argument("--batch", type=int)
    an.add_argument("--degree", type=int, help="parallel degree D")
    an.add_argument("--tp-degree", type=int, help="TP factor of the TPSP grid (default 2)")
    an.add_argument("--kv-groups", type=int, help="GQA ratio g")
    an.add_argument("--recompute", choices=[r.value for r in Recompute])
    an.add_argument("--phase", choices=[p.value for p in Phase])
    an.add_argument("--tsp-gradient", choices=GRADIENT_ACCOUNTINGS, default=PRINTED)
    an.add_argument("--capacity-gb", type=float, default=192.0, help="device memory for exceeds_capacity")
    an.set_defaults(func=cmd_analyze)

    cx = sub.add_parser("crossover", parents=[common], help="TSP/TP forward-volume ratio grid")
    cx.add_argument("--hidden", type=int)
    cx.add_argument("--degree", type=int)
    cx.add_argument("--kv-groups", type=int)
    cx.add_argument("--batch", default="1:32:x2", help="batch range")
    cx.add_argument("--seq-len", default="1024:131072:x2", help="sequence-length range")
    cx.set_defaults(func=cmd_crossover)

    vf = sub.add_parser("verify", parents=[common], help="equivalence and ledger-agreement matrix")
    vf.add_argument("scale", choices=tuple(SCALES), nargs="?", default="tiny")
    vf.set_defaults(func=cmd_verify)

    sm = sub.add_parser("simulate", parents=[common], help="one simulated forward layer")
    sm.add_argument("--scale", choices=tuple(SCALES), help="replace model geometry and B,S by a preset")
    sm.add_argument("--strategy", choices=[s.value for s in Strategy])
    sm.add_argument("--degree", type=int)
    sm.add_argument("--tp-degree", type=int)
    sm.add_argument("--sp-degree", type=int)
    sm.add_argument("--head-bucket", type=int)
    sm.add_argument("--dump-config", help="write the effective RunConfig here")
    sm.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except (ConfigError, ShardingError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
