"""Adaptive metamorphic testing campaigns.

Every mode shares one loop: draw a source, pick a relation (and
parameter), build the follow-up, execute it, judge it, optionally learn,
and append one JSON line to the log.  Three independent PCG64 streams
(source draw, exploration, oracle) are derived from the campaign seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bandit import ExplorationConfig, SnapshotError, canonical_bytes, parse_canonical
from .features import FeatureExtractor, FeatureSpec
from .hierarchy import HierarchyState, RelationChoice, main_reward, param_reward, registry_hash
from .images import read_ppm
from .relations import MR, MR_ORDER, apply_mr, param_grid, transform_boxes
from .suts import ExternalSUT, OracleSpec, OracleSUT, SutError, SutOutput, SutRequest
from .verdicts import (
    GroundTruth,
    MapConfig,
    Verdict,
    classification_verdict,
    detection_verdict,
    map_score,
)

log = logging.getLogger(__name__)

MODES = ("amt", "random", "baseline", "boundary")


class ConfigError(ValueError):
    """Invalid campaign configuration; raised before any artifact is written."""


# ------------------------------------------------------------------ suite

@dataclass(frozen=True)
class Source:
    id: str
    image_path: str
    label: int | None = None
    annotation_path: str | None = None


def load_manifest(path, task: str = "classification") -> list[Source]:
    """Read ``id,image,target`` rows; target is a class id or an annotation JSON path."""
    base = os.path.dirname(os.path.abspath(path))
    sources, seen = [], set()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "image", "target"]:
            raise ConfigError(f"{path}: header must be 'id,image,target'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            sid, image, target = (c.strip() for c in row)
            if sid in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate source id {sid!r}")
            seen.add(sid)
            image = os.path.join(base, image)
            if task == "classification":
                try:
                    sources.append(Source(sid, image, label=int(target)))
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: class {target!r} is not an integer") from None
            else:
                sources.append(Source(sid, image, annotation_path=os.path.join(base, target)))
    if not sources:
        raise ConfigError(f"{path}: manifest lists no sources")
    return sources


def load_annotations(path) -> tuple[GroundTruth, ...]:
    with open(path) as fh:
        return tuple(GroundTruth.from_json(d) for d in json.load(fh))


# ----------------------------------------------------------------- config

@dataclass(frozen=True)
class CampaignConfig:
    suite: str
    sut: dict
    mode: str = "amt"
    iterations: int = 1000
    seed: int = 0
    task: str = "classification"
    features: FeatureSpec = field(default_factory=FeatureSpec)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    boundary_mr: str | None = None
    sampling: str = "random"
    snapshot_in: str | None = None
    snapshot_out: str | None = None
    log: str | None = None
    baseline_table: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations!r}")
        if self.task not in ("classification", "detection"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.sampling not in ("random", "sequential"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.mode == "boundary":
            try:
                mr = MR.parse(self.boundary_mr)
            except ValueError as exc:
                raise ConfigError(f"boundary mode: {exc}") from None
            if not mr.parameterized:
                raise ConfigError(f"boundary mode needs a parameterized relation, got {mr.value}")
        kind = self.sut.get("kind")
        if kind not in ("oracle", "external"):
            raise ConfigError(f"sut.kind must be 'oracle' or 'external', got {kind!r}")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "CampaignConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "suite" not in data or "sut" not in data:
            raise ConfigError("config needs 'suite' and 'sut'")

        def resolve(p):
            return None if p is None else os.path.join(base_dir, p)

        try:
            data["features"] = FeatureSpec.from_dict(data.get("features"), base_dir)
            data["exploration"] = ExplorationConfig.from_dict(data.get("exploration") or {})
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        for key in ("suite", "snapshot_in", "snapshot_out", "log", "baseline_table"):
            data[key] = resolve(data.get(key))
        return cls(base_dir=base_dir, **data)

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def with_overrides(self, **changes) -> "CampaignConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)


def build_sut(config: CampaignConfig, oracle_rng: np.random.Generator):
    spec = config.sut
    if spec["kind"] == "oracle":
        raw = spec.get("spec")
        try:
            if isinstance(raw, str):
                oracle = OracleSpec.load(os.path.join(config.base_dir, raw))
            elif isinstance(raw, dict):
                oracle = OracleSpec.from_dict(raw)
            else:
                raise ConfigError("oracle sut needs 'spec' (path or inline object)")
            oracle.validate()
        except (OSError, ValueError) as exc:
            raise ConfigError(f"oracle spec: {exc}") from None
        return OracleSUT(oracle, oracle_rng)
    command = spec.get("command")
    if not command:
        raise ConfigError("external sut needs 'command'")
    return ExternalSUT(command, timeout=float(spec.get("timeout", 30.0)), cwd=config.base_dir)


# ---------------------------------------------------------------- records

def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _state_hex(gen: np.random.Generator) -> str:
    return format(gen.bit_generator.state["state"]["state"], "032x")


@dataclass
class CampaignResult:
    records: list[dict]
    hierarchy: HierarchyState | None = None
    baseline: dict | None = None
    wall_time: float = 0.0
    sut_time: float = 0.0
    failures: int = 0

    @property
    def violation_rate(self) -> float:
        return self.records[-1]["cumulative_violation_rate"] if self.records else 0.0

    @property
    def overhead_per_iteration(self) -> float:
        if not self.records:
            return 0.0
        return (self.wall_time - self.sut_time) / len(self.records)


class _Streams:
    def __init__(self, seed: int):
        source, explore, oracle = np.random.SeedSequence(seed).spawn(3)
        self.source = np.random.Generator(np.random.PCG64(source))
        self.explore = np.random.Generator(np.random.PCG64(explore))
        self.oracle = np.random.Generator(np.random.PCG64(oracle))
        self.hierarchy_seed = int(explore.generate_state(1)[0])


class Campaign:
    """Shared machinery: suite, features, SUT, cached source outputs."""

    def __init__(self, config: CampaignConfig):
        self.config = config
        self.sources = load_manifest(config.suite, config.task)
        self.features = FeatureExtractor(config.features)
        try:
            self.features.validate([s.id for s in self.sources])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.streams = _Streams(config.seed)
        self.sut = build_sut(config, self.streams.oracle)
        self.map_config = MapConfig()
        self._images: dict[str, object] = {}
        self._truths: dict[str, tuple] = {}
        self._source_out: dict[str, tuple] = {}
        self.iteration = 0
        self.violations = 0
        self.completed = 0
        self.sut_time = 0.0

    # -- state -------------------------------------------------------

    def campaign_state(self) -> dict:
        return {
            "iteration": self.iteration,
            "violations": self.violations,
            "completed": self.completed,
            "seed": self.config.seed,
            "streams": {
                name: _json_state(getattr(self.streams, name)) for name in ("source", "explore", "oracle")
            },
        }

    def restore(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.violations = int(state["violations"])
        self.completed = int(state["completed"])
        for name, st in state["streams"].items():
            getattr(self.streams, name).bit_generator.state = _state_from_json(st)

    # -- per-source data --------------------------------------------

    def image(self, src: Source):
        img = self._images.get(src.id)
        if img is None:
            try:
                img = read_ppm(src.image_path)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"source {src.id}: {exc}") from None
            self._images[src.id] = img
        return img

    def truths(self, src: Source):
        if self.config.task != "detection":
            return None
        truths = self._truths.get(src.id)
        if truths is None:
            truths = load_annotations(src.annotation_path)
            self._truths[src.id] = truths
        return truths

    def source_class(self, src: Source) -> int:
        if src.label is not None:
            return src.label
        truths = self.truths(src)
        return truths[0].class_id if truths else 0

    def context(self, src: Source) -> np.ndarray:
        return self.features.context(src.id, lambda: self.image(src))

    def draw_source(self) -> Source:
        if self.config.sampling == "sequential":
            return self.sources[self.iteration % len(self.sources)]
        return self.sources[int(self.streams.source.integers(len(self.sources)))]

    def _execute(self, request: SutRequest) -> SutOutput:
        start = time.perf_counter()
        try:
            return self.sut.execute(request)
        finally:
            self.sut_time += time.perf_counter() - start

    def source_output(self, src: Source):
        cached = self._source_out.get(src.id)
        if cached is None:
            out = self._execute(SutRequest(src.id, self.image(src), self.config.task,
                                           self.truths(src), None, src.label))
            score = None
            if self.config.task == "detection":
                score = map_score(out.detections, self.truths(src), self.map_config)
            cached = (out, score)
            self._source_out[src.id] = cached
        return cached

    def run_followup(self, src: Source, mr: MR, param) -> tuple[Verdict, dict]:
        """Execute one follow-up test; returns the verdict and extra log fields."""
        source_out, source_map = self.source_output(src)
        img = self.image(src)
        followup = apply_mr(mr, param, img)
        truths = self.truths(src)
        if truths is not None:
            truths = tuple(GroundTruth(b, t.class_id) for t in truths
                           for b in transform_boxes(mr, param, [t.box], img.width, img.height))
        out = self._execute(SutRequest(src.id, followup, self.config.task, truths, (mr, param), src.label))
        extra = {"source_output": source_out.to_json(), "followup_output": out.to_json()}
        if self.config.task == "classification":
            verdict = classification_verdict(source_out.label, out.label)
        else:
            followup_map = map_score(out.detections, truths, self.map_config)
            verdict = detection_verdict(source_map, followup_map, self.map_config)
            extra.update(source_map=source_map, followup_map=followup_map)
        return verdict, extra

    def close(self):
        self.sut.close()


def _json_state(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    return {"state": format(st["state"]["state"], "x"), "inc": format(st["state"]["inc"], "x"),
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _state_from_json(data: dict) -> dict:
    return {"bit_generator": "PCG64",
            "state": {"state": int(data["state"], 16), "inc": int(data["inc"], 16)},
            "has_uint32": data["has_uint32"], "uinteger": data["uinteger"]}


# ------------------------------------------------------------- snapshots

def write_snapshot(path, hierarchy: HierarchyState, campaign: Campaign) -> None:
    body = {"format": "adaptmt-campaign", "hierarchy": hierarchy.to_dict(),
            "campaign": campaign.campaign_state()}
    _atomic_write(path, canonical_bytes(body))


def read_snapshot(path) -> tuple[HierarchyState, dict | None]:
    try:
        with open(path, "rb") as fh:
            body = parse_canonical(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read snapshot {path}: {exc}") from None
    if body.get("format") == "adaptmt-campaign":
        return HierarchyState.from_dict(body["hierarchy"]), body.get("campaign")
    return HierarchyState.from_dict(body), None


def _atomic_write(path, payload: bytes) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ------------------------------------------------------------------ loop

class _LogSink:
    def __init__(self, path):
        self.fh = None
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self.fh = open(path, "w")

    def write(self, record: dict):
        if self.fh:
            self.fh.write(dumps_record(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _loop(campaign: Campaign, iterations: int, mode: str,
          choose: Callable, learn: Callable | None, checkpoint: Callable) -> list[dict]:
    registry = registry_hash()
    sink = _LogSink(campaign.config.log)
    records = []
    try:
        for _ in range(iterations):
            src = campaign.draw_source()
            context = campaign.context(src)
            choice: RelationChoice = choose(context)
            campaign.iteration += 1
            record = {
                "iteration": campaign.iteration,
                "mode": mode,
                "registry": registry,
                "source_id": src.id,
                "source_class": campaign.source_class(src),
                "mr": choice.mr.value,
                "param": choice.param,
                "main_propensity": choice.main_propensity,
                "param_propensity": choice.param_propensity,
                "failed": False,
                "error": None,
                "verdict": None,
                "main_reward": None,
                "param_reward": None,
            }
            try:
                verdict, extra = campaign.run_followup(src, choice.mr, choice.param)
            except SutError as exc:
                log.warning("iteration %d: SUT failure: %s", campaign.iteration, exc)
                record.update(failed=True, error=str(exc))
            else:
                record.update(extra)
                record["verdict"] = verdict.value
                record["main_reward"] = main_reward(verdict)
                if choice.param is not None:
                    record["param_reward"] = param_reward(choice.param, verdict, choice.mr)
                campaign.completed += 1
                campaign.violations += verdict == Verdict.VIOLATED
                if learn is not None:
                    learn(context, choice, verdict)
            record["cumulative_violation_rate"] = (
                campaign.violations / campaign.completed if campaign.completed else 0.0)
            record["rng_checkpoint"] = checkpoint()
            sink.write(record)
            records.append(record)
    finally:
        sink.close()
    return records


def _start(config: CampaignConfig) -> tuple[Campaign, HierarchyState]:
    campaign = Campaign(config)
    n = campaign.features.dimension
    if config.snapshot_in:
        hierarchy, state = read_snapshot(config.snapshot_in)
        if hierarchy.n != n:
            raise ConfigError(f"snapshot context dimension {hierarchy.n} != features {n}")
        if state is not None:
            campaign.restore(state)
    else:
        hierarchy = HierarchyState(n, config.exploration, seed=campaign.streams.hierarchy_seed)
    return campaign, hierarchy


def _hierarchy_checkpoint(campaign: Campaign, hierarchy: HierarchyState) -> Callable:
    def checkpoint():
        parts = [_state_hex(campaign.streams.source), _state_hex(campaign.streams.oracle),
                 _state_hex(hierarchy.main.rng),
                 *(_state_hex(core.rng) for core in hierarchy.params.values())]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]
    return checkpoint


def _finish(config, campaign, hierarchy, records, started) -> CampaignResult:
    if config.snapshot_out:
        write_snapshot(config.snapshot_out, hierarchy, campaign)
    campaign.close()
    return CampaignResult(records, hierarchy, wall_time=time.perf_counter() - started,
                          sut_time=campaign.sut_time)


def run_amt(config: CampaignConfig) -> CampaignResult:
    """Learn which relations (and parameters) reveal violations."""
    started = time.perf_counter()
    campaign, hierarchy = _start(config)
    try:
        records = _loop(campaign, config.iterations, "amt", hierarchy.select_relation,
                        hierarchy.update, _hierarchy_checkpoint(campaign, hierarchy))
    except BaseException:
        campaign.close()
        raise
    return _finish(config, campaign, hierarchy, records, started)


def run_boundary(config: CampaignConfig) -> CampaignResult:
    """Fix the relation; only its parameter bandit selects and learns."""
    mr = MR.parse(config.boundary_mr)
    if not mr.parameterized:
        raise ConfigError(f"boundary mode needs a parameterized relation, got {mr.value}")
    started = time.perf_counter()
    campaign, hierarchy = _start(config)

    def learn(context, choice, verdict):
        hierarchy.update(context, choice, verdict, update_main=False)

    try:
        records = _loop(campaign, config.iterations, "boundary",
                        lambda ctx: hierarchy.select_param(mr, ctx, 1.0), learn,
                        _hierarchy_checkpoint(campaign, hierarchy))
    except BaseException:
        campaign.close()
        raise
    return _finish(config, campaign, hierarchy, records, started)


def run_random(config: CampaignConfig) -> CampaignResult:
    """Uniform relation and parameter choice; no learning and no snapshot."""
    started = time.perf_counter()
    campaign = Campaign(config)
    rng = campaign.streams.explore

    def choose(_context):
        mr = MR_ORDER[int(rng.integers(len(MR_ORDER)))]
        if not mr.parameterized:
            return RelationChoice(mr, None, 1.0 / len(MR_ORDER))
        grid = param_grid(mr)
        return RelationChoice(mr, grid[int(rng.integers(len(grid)))], 1.0 / len(MR_ORDER), 1.0 / len(grid))

    def checkpoint():
        parts = [_state_hex(campaign.streams.source), _state_hex(campaign.streams.oracle), _state_hex(rng)]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    try:
        records = _loop(campaign, config.iterations, "random", choose, None, checkpoint)
    finally:
        campaign.close()
    return CampaignResult(records, wall_time=time.perf_counter() - started, sut_time=campaign.sut_time)


# -------------------------------------------------------------- baseline

def arm_combinations() -> list[tuple[MR, int | None]]:
    """All 59 (relation, parameter) pairs: 5 plain relations, 36 rotations, 18 shears."""
    arms = []
    for mr in MR_ORDER:
        if mr.parameterized:
            arms.extend((mr, p) for p in param_grid(mr))
        else:
            arms.append((mr, None))
    return arms


def arm_label(mr, param) -> str:
    mr = MR.parse(mr)
    return mr.value if param is None else f"{mr.value}:{param}"


def run_baseline(config: CampaignConfig) -> CampaignResult:
    """Exhaustive search: every arm combination on every source, in manifest order.

    ``result.baseline`` maps arm label -> class -> [violations, executions];
    failed executions are left out of both counts.
    """
    started = time.perf_counter()
    campaign = Campaign(config)
    arms = arm_combinations()
    table: dict[str, dict[int, list[int]]] = {arm_label(*a): {} for a in arms}
    failures = 0
    try:
        for src in campaign.sources:
            cls = campaign.source_class(src)
            for mr, param in arms:
                try:
                    verdict, _ = campaign.run_followup(src, mr, param)
                except SutError as exc:
                    failures += 1
                    log.warning("baseline %s %s: SUT failure: %s", src.id, arm_label(mr, param), exc)
                    continue
                cell = table[arm_label(mr, param)].setdefault(cls, [0, 0])
                cell[0] += verdict == Verdict.VIOLATED
                cell[1] += 1
    finally:
        campaign.close()
    if config.baseline_table:
        write_baseline_table(config.baseline_table, table)
    return CampaignResult([], baseline=table, wall_time=time.perf_counter() - started,
                          sut_time=campaign.sut_time, failures=failures)


def baseline_rows(table: dict) -> tuple[list[str], list[list]]:
    classes = sorted({c for cells in table.values() for c in cells})
    header = ["relation", *map(str, classes), "all"]
    rows = []
    for label, cells in table.items():
        row = [label]
        for c in classes:
            v, n = cells.get(c, (0, 0))
            row.append(v / n if n else None)
        tv = sum(v for v, _ in cells.values())
        tn = sum(n for _, n in cells.values())
        row.append(tv / tn if tn else None)
        rows.append(row)
    return header, rows


def write_baseline_table(path, table: dict) -> None:
    header, rows = baseline_rows(table)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], *("" if v is None else repr(v) for v in row[1:])])


def read_baseline_table(path) -> dict[str, dict[str, float | None]]:
    """Parse a baseline CSV into ``{relation label: {column: rate}}``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "relation":
            raise ValueError(f"{path}: not a baseline table")
        out = {}
        for row in reader:
            out[row[0]] = {col: (float(v) if v != "" else None) for col, v in zip(header[1:], row[1:])}
    return out


def run(config: CampaignConfig) -> CampaignResult:
    return {"amt": run_amt, "random": run_random, "baseline": run_baseline,
            "boundary": run_boundary}[config.mode](config)


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
