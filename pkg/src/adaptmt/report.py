"""Reports folded from campaign logs.

Everything here is a pure function of the log records (plus an optional
baseline table), so a report can always be recomputed from raw logs.
"""
from __future__ import annotations

import csv
import json
import os
from collections import defaultdict

from .campaign import read_baseline_table, read_log
from .relations import MR_ORDER, param_grid

BANDIT_MODES = ("amt", "boundary")


class ReportError(ValueError):
    pass


def load_logs(paths) -> list[dict]:
    records = []
    for path in paths:
        try:
            chunk = read_log(path)
        except (OSError, ValueError) as exc:
            raise ReportError(f"cannot read log {path}: {exc}") from None
        if not chunk:
            raise ReportError(f"log {path} is empty")
        records.extend(chunk)
    check_registry(records)
    return records


def check_registry(records) -> str:
    if not records:
        raise ReportError("no log records to report on")
    registries = {r.get("registry") for r in records}
    if len(registries) != 1:
        raise ReportError(f"logs mix relation registries: {sorted(map(str, registries))}")
    return registries.pop()


def _group(mode: str) -> str:
    return "bandit" if mode in BANDIT_MODES else mode


def overall(records) -> dict:
    done = [r for r in records if not r["failed"]]
    violated = sum(r["verdict"] == "Violated" for r in done)
    return {
        "records": len(records),
        "completed": len(done),
        "failures": len(records) - len(done),
        "violations": violated,
        "violation_rate": violated / len(done) if done else None,
    }


def per_mr_rows(records, baseline: dict | None = None) -> list[dict]:
    """One row per relation with selections, violations, rate and selection frequency per mode group."""
    stats = defaultdict(lambda: [0, 0])   # (group, mr) -> [selections, violations]
    totals = defaultdict(int)
    for r in records:
        if r["failed"]:
            continue
        g = _group(r["mode"])
        cell = stats[(g, r["mr"])]
        cell[0] += 1
        cell[1] += r["verdict"] == "Violated"
        totals[g] += 1
    groups = sorted(totals)
    rows = []
    for mr in MR_ORDER:
        row = {"relation": mr.value}
        for g in groups:
            sel, vio = stats.get((g, mr.value), (0, 0))
            row[f"{g}_selections"] = sel
            row[f"{g}_violations"] = vio
            row[f"{g}_rate"] = vio / sel if sel else None
            row[f"{g}_frequency"] = sel / totals[g]
        if baseline is not None:
            row["baseline_rate"] = baseline_rate(baseline, mr)
        rows.append(row)
    return rows


def baseline_rate(baseline: dict, mr) -> float | None:
    """Violation rate of ``mr`` in a baseline table; parameter rows are averaged."""
    labels = ([f"{mr.value}:{p}" for p in param_grid(mr)] if mr.parameterized else [mr.value])
    values = [baseline.get(label, {}).get("all") for label in labels]
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def param_rows(records) -> list[dict]:
    stats = defaultdict(lambda: [0, 0])
    totals = defaultdict(int)
    for r in records:
        if r["failed"] or r["param"] is None:
            continue
        key = (_group(r["mode"]), r["mr"])
        cell = stats[key + (r["param"],)]
        cell[0] += 1
        cell[1] += r["verdict"] == "Violated"
        totals[key] += 1
    rows = []
    for (g, mr), total in sorted(totals.items()):
        for p in param_grid(mr):
            sel, vio = stats.get((g, mr, p), (0, 0))
            rows.append({"group": g, "relation": mr, "param": p, "selections": sel,
                         "violations": vio, "rate": vio / sel if sel else None,
                         "frequency": sel / total})
    return rows


def build_report(records, baseline: dict | None = None) -> dict:
    check_registry(records)
    by_group = defaultdict(list)
    for r in records:
        by_group[_group(r["mode"])].append(r)
    return {
        "per_mr": per_mr_rows(records, baseline),
        "params": param_rows(records),
        "summary": {
            "registry": records[0]["registry"],
            "groups": {g: overall(rs) for g, rs in sorted(by_group.items())},
            # logs carry no timing so that replays stay byte-identical
            "wall_time_per_iteration": None,
        },
    }


# -------------------------------------------------------------- CSV I/O

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ReportError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(rows[0])
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return [dict(zip(header, map(_parse, row))) for row in reader]


def write_report(report: dict, out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "per_mr": os.path.join(out_dir, "per_mr.csv"),
        "params": os.path.join(out_dir, "param_histogram.csv"),
        "summary": os.path.join(out_dir, "summary.json"),
    }
    write_rows(paths["per_mr"], report["per_mr"])
    if report["params"]:
        write_rows(paths["params"], report["params"])
    else:
        del paths["params"]
    with open(paths["summary"], "w") as fh:
        json.dump(report["summary"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def report_from_files(log_paths, baseline_path=None) -> dict:
    records = load_logs(log_paths)
    baseline = None
    if baseline_path:
        try:
            baseline = read_baseline_table(baseline_path)
        except (OSError, ValueError) as exc:
            raise ReportError(str(exc)) from None
    return build_report(records, baseline)


def compare(amt_records, random_records) -> dict:
    """Overall violation rates of an adaptive and a random campaign and their gap."""
    if not amt_records or not random_records:
        raise ReportError("both logs must be non-empty")
    if check_registry(amt_records) != check_registry(random_records):
        raise ReportError("logs were written against different relation registries")
    a = overall(amt_records)
    b = overall(random_records)
    if a["violation_rate"] is None or b["violation_rate"] is None:
        raise ReportError("a log has no completed executions")
    diff = a["violation_rate"] - b["violation_rate"]
    return {
        "amt_violation_rate": a["violation_rate"],
        "random_violation_rate": b["violation_rate"],
        "difference": diff,
        "amt_better": diff > 0,
        "amt_completed": a["completed"],
        "random_completed": b["completed"],
    }
