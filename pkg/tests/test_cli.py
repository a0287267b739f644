import csv
import io
import json

import pytest

from tsp_sim.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main, parse_range


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_parse_range():
    assert parse_range("1024:8192:x2") == [1024, 2048, 4096, 8192]
    assert parse_range("1:7:+3") == [1, 4, 7]
    assert parse_range("5") == [5]
    assert parse_range("3,1") == [3, 1]
    for bad in ("1:2", "1:4:y2", "8:4:x2", "0", "1:4:x1", "a"):
        with pytest.raises(ValueError):
            parse_range(bad)


def test_analyze_memory_two_panels(capsys):
    code, out, _ = run(capsys, "analyze", "memory", "--seq-len", "8192", "--seq-len", "65536", "--format", "csv")
    assert code == EXIT_OK
    table = rows(out)
    assert [r["strategy"] for r in table[:5]] == ["DP", "TP", "SP", "TPSP(2,4)", "TSP"]
    tsp = next(r for r in table if r["strategy"] == "TSP" and r["seq_len"] == "8192")
    assert tsp["total_bytes"] == "21743271936" and tsp["total_gb"] == "21.74"
    over = {r["strategy"] for r in table if r["seq_len"] == "65536" and r["exceeds_capacity"] == "true"}
    assert over == {"DP", "TP"}


def test_analyze_comm_sweep_json(capsys):
    code, out, _ = run(capsys, "analyze", "comm", "--sweep", "seq-len", "1024:131072:x2", "--format", "json")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["kind"] == "comm"
    assert len(doc["rows"]) == 8 * 5
    assert list(doc["rows"][0]) == doc["columns"]
    seqs = [r["seq_len"] for r in doc["rows"]]
    assert seqs == sorted(seqs)


def test_analyze_flops_d1(capsys):
    code, out, _ = run(capsys, "analyze", "flops", "--degree", "1", "--format", "csv")
    assert code == EXIT_OK
    by = {r["strategy"]: int(r["total_flops"]) for r in rows(out)}
    assert by["DP"] == by["TP"] * 1


def test_analyze_other_sweeps(capsys):
    for key, spec in (("batch", "1:4:x2"), ("hidden", "2048:4096:+2048"), ("degree", "2:8:x2")):
        code, out, _ = run(capsys, "analyze", "comm", "--sweep", key, spec, "--format", "csv")
        assert code == EXIT_OK
        assert {r["sweep_key"] for r in rows(out)} == {key}


def test_crossover_grid(capsys):
    code, out, _ = run(capsys, "crossover", "--format", "csv")
    assert code == EXIT_OK
    grid = rows(out)
    assert len(grid) == 6 * 8
    for r in grid:
        if r["tsp_wins"] != r["exact_tsp_wins"]:
            assert r["boundary"] == "true"
    assert any(r["boundary"] == "true" for r in grid)


def test_crossover_single_cell(capsys):
    code, out, _ = run(capsys, "crossover", "--batch", "1", "--seq-len", "32768", "--format", "json")
    doc = json.loads(out)
    assert len(doc["rows"]) == 1 and doc["rows"][0]["boundary"] is False
    assert abs(doc["rows"][0]["ratio"] - 1.018) < 1e-3


def test_crossover_invalid_range(capsys):
    code, _, err = run(capsys, "crossover", "--batch", "4:1:x2")
    assert code == EXIT_VALIDATION and "range" in err


def test_verify_tiny_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["verify", "tiny", "--seed", "7", "--out", str(a)]) == EXIT_OK
    assert main(["verify", "tiny", "--seed", "7", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    table = rows(a.read_text())
    assert all(r["status"] == "pass" for r in table)
    assert all(float(r["rel_error"]) <= 1e-12 for r in table if r["degree"] == "1")


def test_simulate_tsp_tiny(capsys):
    code, out, _ = run(capsys, "simulate", "--scale", "tiny", "--strategy", "TSP", "--degree", "2")
    assert code == EXIT_OK
    rep = json.loads(out)
    h, S, beta = 32, 32, 2
    p_attn, p_mlp = 4 * h * h, 3 * 2 * h * h
    assert rep["per_device"]["weight_movement"] == p_attn * beta + p_mlp * beta / 2
    assert rep["per_device"]["activation_exchange"] == 2 * S * h * beta / 2
    assert rep["ledger_matches_formula"] and rep["rel_error"] < 1e-12
    assert len(rep["output_sha256"]) == 64


@pytest.mark.parametrize("strategy", ["SP", "DP"])
def test_simulate_zero_weight(capsys, strategy):
    code, out, _ = run(capsys, "simulate", "--scale", "tiny", "--strategy", strategy, "--degree", "4")
    rep = json.loads(out)
    assert rep["per_device"]["weight_movement"] == 0
    if strategy == "DP":
        assert rep["per_device_total"] == 0


def test_simulate_csv_and_tpsp(capsys):
    code, out, _ = run(
        capsys, "simulate", "--scale", "tiny", "--strategy", "TPSP", "--tp-degree", "2", "--sp-degree", "2", "--format", "csv"
    )
    assert code == EXIT_OK
    assert [r["rank"] for r in rows(out)] == ["0", "1", "2", "3"]


def test_simulate_config_roundtrip(capsys, tmp_path):
    dumped = tmp_path / "cfg.json"
    first, second = tmp_path / "1.json", tmp_path / "2.json"
    assert main(["simulate", "--scale", "tiny", "--strategy", "TSP", "--degree", "4", "--seed", "3",
                 "--dump-config", str(dumped), "--out", str(first)]) == EXIT_OK
    assert main(["simulate", "--config", str(dumped), "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()


def test_validation_exit_codes(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hidden_size": 100, "num_heads": 3}}))
    code, _, err = run(capsys, "analyze", "memory", "--config", str(bad))
    assert code == EXIT_VALIDATION and "model." in err
    assert run(capsys, "analyze", "nothing")[0] == EXIT_VALIDATION
    assert run(capsys, "analyze", "comm", "--sweep", "width", "1:2:x2")[0] == EXIT_VALIDATION
    assert run(capsys, "simulate", "--scale", "tiny", "--strategy", "TSP", "--degree", "3")[0] == EXIT_VALIDATION


def test_io_exit_code(capsys, tmp_path):
    assert run(capsys, "analyze", "memory", "--out", str(tmp_path / "missing" / "x.csv"))[0] == EXIT_IO
    assert run(capsys, "analyze", "memory", "--config", str(tmp_path / "none.json"))[0] == EXIT_IO


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
