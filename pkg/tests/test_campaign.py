import json
import math
import os
import sys
import textwrap

import pytest

from adaptmt.bandit import SnapshotError
from adaptmt.campaign import (
    Campaign,
    CampaignConfig,
    ConfigError,
    arm_combinations,
    arm_label,
    load_manifest,
    read_baseline_table,
    read_log,
    read_snapshot,
    run,
    run_amt,
    write_snapshot,
)
from adaptmt.hierarchy import HierarchyState
from adaptmt.relations import MR
from adaptmt.suts import rates_spec
from adaptmt.synth import make_classification_suite, make_detection_suite, oracle_spec_dict

RECORD_FIELDS = {
    "iteration", "mode", "registry", "source_id", "source_class", "mr", "param",
    "main_propensity", "param_propensity", "failed", "error", "verdict", "main_reward",
    "param_reward", "source_output", "followup_output", "cumulative_violation_rate", "rng_checkpoint",
}


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    manifest = make_classification_suite(root, count=40, size=12, seed=1)
    return manifest


def config(tmp_path, suite, **kw):
    data = {
        "suite": suite,
        "sut": {"kind": "oracle", "spec": oracle_spec_dict(rates_spec("bernoulli", 0))},
        "iterations": 200,
        "seed": 3,
        "log": str(tmp_path / "log.jsonl"),
    }
    data.update(kw)
    return CampaignConfig.from_dict(data, str(tmp_path))


def log_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ------------------------------------------------------------ configuration

def test_iteration_bounds(tmp_path, suite):
    with pytest.raises(ConfigError):
        config(tmp_path, suite, iterations=0)
    result = run(config(tmp_path, suite, iterations=1))
    assert len(result.records) == 1
    assert len(read_log(tmp_path / "log.jsonl")) == 1


@pytest.mark.parametrize("changes", [
    {"mode": "exhaustive"},
    {"mode": "boundary", "boundary_mr": "Blur"},
    {"mode": "boundary"},
    {"sut": {"kind": "docker"}},
    {"sampling": "shuffled"},
    {"unknown_key": 1},
    {"exploration": {"epsilon": 2}},
])
def test_bad_configs(tmp_path, suite, changes):
    with pytest.raises(ConfigError):
        config(tmp_path, suite, **changes)


def test_bad_oracle_spec_rejected_before_artifacts(tmp_path, suite):
    cfg = config(tmp_path, suite, sut={"kind": "oracle", "spec": {"class_count": 10, "table": {"*": {"Blur": 0.1}}}})
    with pytest.raises(ConfigError):
        run(cfg)
    assert not os.path.exists(tmp_path / "log.jsonl")


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    for text in ("", "name,path,label\n", "id,image,target\n", "id,image,target\na,x.ppm,1\na,y.ppm,2\n",
                 "id,image,target\na,x.ppm,cat\n", "id,image,target\na,x.ppm\n"):
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_manifest(p)
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "missing.csv")


def test_config_file_relative_paths(tmp_path, suite):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"suite": suite, "sut": {"kind": "oracle", "spec": "o.json"}, "log": "out/l.jsonl"}))
    (tmp_path / "o.json").write_text(json.dumps(oracle_spec_dict(rates_spec())))
    cfg = CampaignConfig.load(path)
    assert cfg.log == str(tmp_path / "out" / "l.jsonl")
    run(cfg.with_overrides(iterations=5))
    assert len(read_log(cfg.log)) == 5


# -------------------------------------------------------------------- records

def test_record_schema_and_accounting(tmp_path, suite):
    result = run(config(tmp_path, suite))
    records = read_log(tmp_path / "log.jsonl")
    assert records == result.records
    assert [r["iteration"] for r in records] == list(range(1, 201))
    for r in records:
        assert set(r) == RECORD_FIELDS
        assert r["mode"] == "amt"
        assert (r["param"] is None) == (r["param_propensity"] is None)
        assert 0 < r["main_propensity"] <= 1
        assert r["main_reward"] == (1.0 if r["verdict"] == "Violated" else 0.0)
    done = [r for r in records if not r["failed"]]
    violated = sum(r["verdict"] == "Violated" for r in done)
    assert records[-1]["cumulative_violation_rate"] == violated / len(done)


def test_logs_are_canonical_json_lines(tmp_path, suite):
    run(config(tmp_path, suite, iterations=20))
    for line in (tmp_path / "log.jsonl").read_text().splitlines():
        assert line == json.dumps(json.loads(line), sort_keys=True, separators=(",", ":"))


def test_source_outputs_cached(tmp_path, suite):
    campaign = Campaign(config(tmp_path, suite))
    calls = []
    inner = campaign.sut.execute
    campaign.sut.execute = lambda req: calls.append(req.relation) or inner(req)
    src = campaign.sources[0]
    for mr in ("Blur", "Invert", "FlipUD"):
        campaign.run_followup(src, MR(mr), None)
    assert calls.count(None) == 1 and len(calls) == 4
    campaign.close()


def test_sequential_sampling(tmp_path, suite):
    result = run(config(tmp_path, suite, sampling="sequential", iterations=45))
    ids = [s.id for s in load_manifest(suite)]
    assert [r["source_id"] for r in result.records] == [ids[i % 40] for i in range(45)]


# --------------------------------------------------------------- determinism

@pytest.mark.parametrize("mode,extra", [("amt", {}), ("random", {}), ("boundary", {"boundary_mr": "Shear"})])
def test_replay_byte_identical(tmp_path, suite, mode, extra):
    run(config(tmp_path, suite, mode=mode, log=str(tmp_path / "a.jsonl"), **extra))
    run(config(tmp_path, suite, mode=mode, log=str(tmp_path / "b.jsonl"), **extra))
    assert log_bytes(tmp_path / "a.jsonl") == log_bytes(tmp_path / "b.jsonl")
    run(config(tmp_path, suite, mode=mode, seed=4, log=str(tmp_path / "c.jsonl"), **extra))
    assert log_bytes(tmp_path / "a.jsonl") != log_bytes(tmp_path / "c.jsonl")


@pytest.mark.parametrize("mode,extra", [("amt", {}), ("boundary", {"boundary_mr": "Rotation"})])
def test_snapshot_continuity(tmp_path, suite, mode, extra):
    full = run(config(tmp_path, suite, mode=mode, iterations=300, log=str(tmp_path / "full.jsonl"), **extra))
    snap = str(tmp_path / "state.json")
    run(config(tmp_path, suite, mode=mode, iterations=150, log=str(tmp_path / "p1.jsonl"),
               snapshot_out=snap, **extra))
    second = run(config(tmp_path, suite, mode=mode, iterations=150, log=str(tmp_path / "p2.jsonl"),
                        snapshot_in=snap, snapshot_out=str(tmp_path / "end.json"), **extra))
    combined = log_bytes(tmp_path / "p1.jsonl") + log_bytes(tmp_path / "p2.jsonl")
    assert combined == log_bytes(tmp_path / "full.jsonl")
    assert second.hierarchy.snapshot() == full.hierarchy.snapshot()


def test_snapshot_dimension_mismatch(tmp_path, suite):
    snap = tmp_path / "other.json"
    campaign = Campaign(config(tmp_path, suite))
    write_snapshot(snap, HierarchyState(5), campaign)
    campaign.close()
    with pytest.raises(ConfigError, match="dimension"):
        run(config(tmp_path, suite, snapshot_in=str(snap)))


def test_snapshot_corruption_rejected(tmp_path, suite):
    snap = tmp_path / "s.json"
    run(config(tmp_path, suite, iterations=10, snapshot_out=str(snap)))
    hierarchy, state = read_snapshot(snap)
    assert state["iteration"] == 10
    data = bytearray(snap.read_bytes())
    data[len(data) // 2] ^= 0x01
    snap.write_bytes(bytes(data))
    with pytest.raises(SnapshotError):
        run(config(tmp_path, suite, snapshot_in=str(snap)))


# ----------------------------------------------------------------- modes

def test_random_mode_propensities_and_no_state(tmp_path, suite):
    snap = tmp_path / "state.json"
    run(config(tmp_path, suite, iterations=50, snapshot_out=str(snap)))
    before = snap.read_bytes()
    result = run(config(tmp_path, suite, mode="random", snapshot_in=str(snap), snapshot_out=str(snap)))
    assert snap.read_bytes() == before
    assert result.hierarchy is None
    for r in result.records:
        assert r["main_propensity"] == 1 / 7
        if r["mr"] == "Rotation":
            assert r["param_propensity"] == 1 / 36
        elif r["mr"] == "Shear":
            assert r["param_propensity"] == 1 / 18


def test_boundary_stays_on_its_relation(tmp_path, suite):
    result = run(config(tmp_path, suite, mode="boundary", boundary_mr="Shear", iterations=300))
    assert {r["mr"] for r in result.records} == {"Shear"}
    assert all(r["main_propensity"] == 1.0 for r in result.records)
    # the main bandit never learns in boundary mode
    assert not result.hierarchy.main.mass.any()
    assert result.hierarchy.params[MR.SHEAR].mass.sum() > 0
    assert not result.hierarchy.params[MR.ROTATION].mass.any()


def test_baseline_counts_and_reproducibility(tmp_path, suite):
    hash_spec = oracle_spec_dict(rates_spec("deterministic-hash", 5, per_class=True))
    a = run(config(tmp_path, suite, mode="baseline", sut={"kind": "oracle", "spec": hash_spec},
                   baseline_table=str(tmp_path / "a.csv")))
    b = run(config(tmp_path, suite, mode="baseline", sut={"kind": "oracle", "spec": hash_spec},
                   baseline_table=str(tmp_path / "b.csv")))
    assert len(arm_combinations()) == 59
    assert set(a.baseline) == {arm_label(*arm) for arm in arm_combinations()}
    for cells in a.baseline.values():
        assert sum(n for _, n in cells.values()) == 40
    assert a.baseline == b.baseline
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    table = read_baseline_table(tmp_path / "a.csv")
    v, n = a.baseline["FlipUD"][1]
    assert table["FlipUD"]["1"] == v / n
    assert arm_label("Rotation", -5) == "Rotation:-5"


def test_baseline_bernoulli_cell(tmp_path_factory):
    root = tmp_path_factory.mktemp("wide")
    manifest = make_classification_suite(root, count=400, size=8, seed=2)
    cfg = CampaignConfig.from_dict({
        "suite": manifest, "mode": "baseline",
        "sut": {"kind": "oracle", "spec": oracle_spec_dict(rates_spec("bernoulli", 0, per_class=True))},
    }, str(root))
    v, n = run(cfg).baseline["FlipUD"][1]
    assert n == 40
    assert abs(v / n - 0.746) <= 3 * math.sqrt(0.746 * 0.254 / n)


# ------------------------------------------------------------- detection

def test_detection_campaign(tmp_path):
    manifest = make_detection_suite(tmp_path / "det", count=10, seed=4)
    spec = oracle_spec_dict(rates_spec("deterministic-hash", 1))
    spec["class_count"] = 3
    cfg = CampaignConfig.from_dict({"suite": manifest, "task": "detection", "iterations": 60, "seed": 1,
                                    "sut": {"kind": "oracle", "spec": spec}}, str(tmp_path))
    result = run(cfg)
    for r in result.records:
        assert r["source_map"] == 1.0
        expected = "Violated" if r["followup_map"] < r["source_map"] - 0.05 else "Pass"
        assert r["verdict"] == expected
    assert {r["verdict"] for r in result.records} == {"Pass", "Violated"}


# -------------------------------------------------------------- failures

FLAKY = textwrap.dedent("""
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        if req["id"].startswith("img_0003#"):
            print("crash!", flush=True)
            continue
        print(json.dumps({"id": req["id"], "label": 0}), flush=True)
""")


def test_sut_failures_are_logged_and_skipped(tmp_path, suite):
    script = tmp_path / "flaky.py"
    script.write_text(FLAKY)
    cfg = config(tmp_path, suite, iterations=120, sampling="sequential",
                 sut={"kind": "external", "command": [sys.executable, str(script)], "timeout": 10})
    result = run_amt(cfg)
    failed = [r for r in result.records if r["failed"]]
    assert failed and all(r["source_id"] == "img_0003" for r in failed)
    assert all(r["verdict"] is None and r["main_reward"] is None and "protocol" in r["error"] for r in failed)
    done = [r for r in result.records if not r["failed"]]
    assert len(done) == 120 - len(failed)
    assert result.records[-1]["cumulative_violation_rate"] == 0.0
    # the bandits only saw completed executions
    assert result.hierarchy.main.mass.sum() == pytest.approx(
        sum(1 / r["main_propensity"] for r in done), rel=1e-9)
