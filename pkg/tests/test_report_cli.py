import json
import math
import os
import subprocess
import sys

import pytest

from adaptmt.campaign import read_baseline_table, read_log
from adaptmt.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from adaptmt.hierarchy import registry_hash
from adaptmt.relations import MR, param_grid
from adaptmt.report import (
    ReportError,
    build_report,
    compare,
    load_logs,
    read_rows,
    write_report,
    write_rows,
)
from adaptmt.suts import AVERAGE_RATES, CLASS_RATES
from adaptmt.synth import write_demo


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    configs = write_demo(root, sources=100, iterations=10000, seed=0)
    return root, configs


def record(i, mr="FlipUD", verdict="Violated", param=None, mode="amt", registry=None):
    return {"iteration": i, "mode": mode, "registry": registry or registry_hash(), "source_id": f"s{i}",
            "source_class": 0, "mr": mr, "param": param, "main_propensity": 0.5,
            "param_propensity": None if param is None else 0.5, "failed": False, "error": None,
            "verdict": verdict, "main_reward": float(verdict == "Violated"), "param_reward": None,
            "source_output": 0, "followup_output": 1, "cumulative_violation_rate": 0.0, "rng_checkpoint": "x"}


def write_log(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return str(path)


# ------------------------------------------------------------------ report

def test_all_flipud_violated(tmp_path):
    report = build_report([record(i) for i in range(1, 21)])
    row = next(r for r in report["per_mr"] if r["relation"] == "FlipUD")
    assert row["bandit_rate"] == 1.0 and row["bandit_frequency"] == 1.0
    others = [r for r in report["per_mr"] if r["relation"] != "FlipUD"]
    assert all(r["bandit_selections"] == 0 and r["bandit_rate"] is None for r in others)
    assert report["summary"]["groups"]["bandit"]["violation_rate"] == 1.0


def test_empty_and_mixed_logs_rejected(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ReportError, match="empty"):
        load_logs([empty])
    assert main(["report", str(empty), "--out-dir", str(tmp_path / "r")]) == EXIT_USAGE
    assert "empty" in capsys.readouterr().err
    a = write_log(tmp_path / "a.jsonl", [record(1)])
    b = write_log(tmp_path / "b.jsonl", [record(1, registry="0" * 16)])
    with pytest.raises(ReportError, match="registr"):
        load_logs([a, b])
    with pytest.raises(ReportError):
        compare(load_logs([a]), [record(1, registry="0" * 16)])


def test_param_histogram_and_frequencies():
    recs = [record(i, "Rotation", "Violated" if i % 2 else "Pass", param=5 if i < 7 else -90)
            for i in range(1, 11)]
    recs += [record(11, "Blur", "Pass")]
    report = build_report(recs)
    rows = [r for r in report["params"] if r["relation"] == "Rotation"]
    assert len(rows) == len(param_grid(MR.ROTATION))
    by_param = {r["param"]: r for r in rows}
    assert by_param[5]["selections"] == 6 and by_param[-90]["selections"] == 4
    assert math.isclose(sum(r["frequency"] for r in rows), 1.0)
    assert math.isclose(sum(r["bandit_frequency"] for r in report["per_mr"]), 1.0)


def test_report_is_a_fold_over_the_log(demo, tmp_path):
    root, configs = demo
    assert main(["run", "amt", "--config", configs["amt"], "--iterations", "600",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    log = str(tmp_path / "amt.jsonl")
    report = build_report(read_log(log))
    records = read_log(log)
    for row in report["per_mr"]:
        mine = [r for r in records if r["mr"] == row["relation"] and not r["failed"]]
        assert row["bandit_selections"] == len(mine)
        assert row["bandit_violations"] == sum(r["verdict"] == "Violated" for r in mine)
    paths = write_report(report, tmp_path / "rep")
    assert read_rows(paths["per_mr"]) == report["per_mr"]
    assert read_rows(paths["params"]) == report["params"]


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": None, "d": "Rotation"}, {"a": -3, "b": 1e-17, "c": 2.5, "d": "x"}]
    write_rows(tmp_path / "x.csv", rows)
    assert read_rows(tmp_path / "x.csv") == rows


def test_amt_report_rates_match_oracle(demo, tmp_path):
    root, configs = demo
    assert main(["run", "amt", "--config", configs["amt"], "--out-dir", str(tmp_path)]) == EXIT_OK
    report = build_report(read_log(tmp_path / "amt.jsonl"))
    checked = 0
    for row in report["per_mr"]:
        n = row["bandit_selections"]
        if n >= 300:
            p = AVERAGE_RATES[row["relation"]] / 100
            assert abs(row["bandit_rate"] - p) <= 3 * math.sqrt(p * (1 - p) / n), row
            checked += 1
    assert checked >= 1


# ----------------------------------------------------------------- compare

def test_compare_identical_and_random_pairs(demo, tmp_path):
    root, configs = demo
    for seed in ("1", "2"):
        assert main(["run", "random", "--config", configs["random"], "--seed", seed,
                     "--out-dir", str(tmp_path / seed)]) == EXIT_OK
    one = load_logs([tmp_path / "1" / "random.jsonl"])
    two = load_logs([tmp_path / "2" / "random.jsonl"])
    assert compare(one, one)["difference"] == 0
    assert abs(compare(one, two)["difference"]) <= 0.03
    out = tmp_path / "cmp.json"
    assert main(["compare", str(tmp_path / "1" / "random.jsonl"), str(tmp_path / "2" / "random.jsonl"),
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["random_completed"] == 10000


# --------------------------------------------------------------------- cli

def test_run_twice_identical_artifacts(demo, tmp_path):
    root, configs = demo
    for name in ("a", "b"):
        assert main(["run", "amt", "--config", configs["amt"], "--seed", "7", "--iterations", "500",
                     "--out-dir", str(tmp_path / name)]) == EXIT_OK
    for artifact in ("amt.jsonl", "amt_state.json"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_boundary_on_plain_relation_rejected(demo, tmp_path, capsys):
    root, configs = demo
    cfg = json.loads(open(configs["boundary"]).read())
    cfg["boundary_mr"] = "Blur"
    path = root / "bad_boundary.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert main(["run", "boundary", "--config", str(path), "--out-dir", str(out)]) == EXIT_USAGE
    assert "parameterized" in capsys.readouterr().err
    assert not out.exists()


def test_missing_config_is_usage_error(tmp_path):
    assert main(["run", "amt", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_baseline_table_matches_oracle(demo, tmp_path):
    root, configs = demo
    assert main(["run", "baseline", "--config", configs["baseline"], "--out-dir", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "baseline.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["relation", *map(str, range(10)), "all"]
    # per (relation, class): pool the parameter rows and compare with the oracle cell
    table = read_baseline_table(tmp_path / "baseline.csv")
    for mr in MR:
        labels = [f"{mr.value}:{p}" for p in param_grid(mr)] if mr.parameterized else [mr.value]
        for c in range(10):
            rate = sum(table[label][str(c)] for label in labels) / len(labels)
            n = 10 * len(labels)
            p = CLASS_RATES[mr.value][c] / 100
            assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1e-12, (mr, c, rate, p)


def test_replay(demo, tmp_path, capsys):
    root, configs = demo
    assert main(["run", "random", "--config", configs["random"], "--iterations", "300",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    log = tmp_path / "random.jsonl"
    assert main(["replay", "--config", configs["random"], "--iterations", "300", "--log", str(log)]) == EXIT_OK
    assert "identical" in capsys.readouterr().out
    lines = log.read_text().splitlines(keepends=True)
    pass_, viol = '"verdict":"Pass"', '"verdict":"Violated"'
    lines[10] = lines[10].replace(pass_, viol) if pass_ in lines[10] else lines[10].replace(viol, pass_)
    log.write_text("".join(lines))
    assert main(["replay", "--config", configs["random"], "--iterations", "300", "--log", str(log)]) == EXIT_FAILED


def test_report_command(demo, tmp_path):
    root, configs = demo
    main(["run", "amt", "--config", configs["amt"], "--iterations", "400", "--out-dir", str(tmp_path)])
    main(["run", "random", "--config", configs["random"], "--iterations", "400", "--out-dir", str(tmp_path)])
    main(["run", "baseline", "--config", configs["baseline"], "--out-dir", str(tmp_path)])
    rep = tmp_path / "rep"
    assert main(["report", str(tmp_path / "amt.jsonl"), str(tmp_path / "random.jsonl"),
                 "--baseline", str(tmp_path / "baseline.csv"), "--out-dir", str(rep)]) == EXIT_OK
    rows = read_rows(rep / "per_mr.csv")
    assert {"bandit_rate", "random_rate", "baseline_rate"} <= set(rows[0])
    summary = json.loads((rep / "summary.json").read_text())
    assert set(summary["groups"]) == {"bandit", "random"}
    for row in rows:
        for key, value in row.items():
            if key.endswith(("_rate", "_frequency")) and value is not None:
                assert 0.0 <= value <= 1.0


def test_console_script_and_module(tmp_path):
    out = subprocess.run([sys.executable, "-m", "adaptmt", "demo", str(tmp_path / "d"), "--sources", "5"],
                         capture_output=True, text=True, check=True)
    assert "amt:" in out.stdout
    assert os.path.exists(tmp_path / "d" / "suite" / "manifest.csv")
