"""Systems under test: a synthetic oracle and an external-process adapter.

The oracle decides violations straight from ``(class, relation, |param|)``
probabilities, so learners can be checked against known ground truth.
The adapter drives a real model in a child process speaking line-delimited
JSON on its standard streams::

    -> {"id": "...", "task": "classification", "image_path": "/tmp/x.ppm"}
    <- {"id": "...", "label": 3}
    -> {"id": "...", "task": "detection", "image_path": "...", "annotations": [...]}
    <- {"id": "...", "detections": [{"box": [x0, y0, x1, y1], "class_id": 1, "score": 0.9}]}
"""
from __future__ import annotations

import hashlib
import json
import os
import queue
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field

import numpy as np

from .images import RasterImage, write_ppm
from .relations import GRID_STEP, MR, param_grid
from .verdicts import Detection, GroundTruth

TASKS = ("classification", "detection")

# Reference violation rates in % per relation and true class, with their average column.
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
CLASS_RATES = {
    "Blur":      (10.60, 11.40, 13.10, 9.81, 7.30, 13.50, 17.70, 9.00, 6.00, 6.20),
    "FlipLR":    (2.90, 1.00, 4.10, 6.71, 2.20, 6.80, 1.30, 2.40, 0.90, 2.40),
    "FlipUD":    (14.90, 74.60, 37.80, 33.13, 59.10, 53.90, 29.30, 92.40, 72.20, 43.30),
    "Grayscale": (4.70, 5.40, 28.10, 7.91, 18.10, 26.00, 14.30, 6.70, 4.80, 5.30),
    "Invert":    (16.50, 29.40, 29.50, 33.13, 41.40, 70.30, 41.80, 38.30, 27.30, 35.70),
    "Rotation":  (25.49, 37.09, 35.43, 17.70, 69.00, 46.10, 20.63, 60.44, 42.44, 50.01),
    "Shear":     (11.22, 4.99, 26.69, 35.79, 45.45, 51.97, 15.63, 40.24, 19.78, 55.24),
}
AVERAGE_RATES = {
    "Blur": 10.46, "FlipLR": 3.07, "FlipUD": 51.06, "Grayscale": 12.13,
    "Invert": 36.33, "Rotation": 40.43, "Shear": 30.70,
}


class SutError(RuntimeError):
    """An execution failed; the campaign logs it and skips the update."""


class OracleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SutRequest:
    source_id: str
    image: RasterImage
    task: str = "classification"
    annotations: tuple[GroundTruth, ...] | None = None
    # oracle-only hints, never sent over the wire
    relation: tuple[MR, int | None] | None = None
    source_class: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if (self.annotations is not None) != (self.task == "detection"):
            raise ValueError("annotations are required for detection and only for detection")


@dataclass(frozen=True)
class SutOutput:
    label: int | None = None
    detections: tuple[Detection, ...] | None = None

    def to_json(self):
        if self.detections is not None:
            return [d.to_json() for d in self.detections]
        return self.label


# --------------------------------------------------------------- oracle

@dataclass(frozen=True)
class Ramp:
    p0: float
    slope: float
    p_max: float

    def __call__(self, magnitude: int) -> float:
        return min(self.p_max, self.p0 + self.slope * magnitude)

    @classmethod
    def from_dict(cls, data: dict) -> "Ramp":
        try:
            ramp = cls(float(data["p0"]), float(data["slope"]), float(data.get("p_max", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleConfigError(f"bad ramp {data!r}: {exc}") from None
        if not (0.0 <= ramp.p0 <= 1.0 and 0.0 <= ramp.p_max <= 1.0):
            raise OracleConfigError("ramp probabilities must lie in [0, 1]")
        return ramp


def _check_prob(p, where: str) -> float:
    try:
        p = float(p)
    except (TypeError, ValueError):
        raise OracleConfigError(f"{where}: probability {p!r} is not a number") from None
    if not 0.0 <= p <= 1.0:
        raise OracleConfigError(f"{where}: probability {p} outside [0, 1]")
    return p


def _parse_entry(mr: MR, entry, where: str):
    """Return a callable ``|param| -> p`` (or a constant for plain relations)."""
    if isinstance(entry, dict):
        if not mr.parameterized:
            raise OracleConfigError(f"{where}: {mr.value} takes no parameter buckets")
        if "ramp" in entry:
            return Ramp.from_dict(entry["ramp"])
        steps = {int(k): _check_prob(v, f"{where}[{k}]") for k, v in entry.items()}
        needed = {abs(p) for p in param_grid(mr)}
        if set(steps) != needed:
            raise OracleConfigError(f"{where}: buckets must cover exactly {sorted(needed)}")
        return steps.__getitem__
    p = _check_prob(entry, where)
    return (lambda _m, p=p: p) if mr.parameterized else p


@dataclass
class OracleSpec:
    class_count: int
    table: dict = field(default_factory=dict)
    mode: str = "deterministic-hash"
    seed: int = 0
    ramp: Ramp | None = None

    def __post_init__(self):
        if self.class_count < 1:
            raise OracleConfigError("class_count must be positive")
        if self.mode not in ("deterministic-hash", "bernoulli"):
            raise OracleConfigError(f"unknown oracle mode {self.mode!r}")
        self._cells: dict[tuple[str, MR], object] = {}
        for cls_key, row in self.table.items():
            if cls_key != "*":
                try:
                    c = int(cls_key)
                except ValueError:
                    raise OracleConfigError(f"class key {cls_key!r} is neither '*' nor an integer") from None
                if not 0 <= c < self.class_count:
                    raise OracleConfigError(f"class {c} outside [0, {self.class_count})")
            if not isinstance(row, dict):
                raise OracleConfigError(f"table[{cls_key!r}] must map relation names to entries")
            for name, entry in row.items():
                try:
                    mr = MR.parse(name)
                except ValueError as exc:
                    raise OracleConfigError(str(exc)) from None
                self._cells[(str(cls_key), mr)] = _parse_entry(mr, entry, f"table[{cls_key}][{name}]")

    @classmethod
    def from_dict(cls, data: dict) -> "OracleSpec":
        unknown = set(data) - {"class_count", "mode", "seed", "table", "ramp"}
        if unknown:
            raise OracleConfigError(f"unknown oracle spec keys: {sorted(unknown)}")
        if "table" not in data and "ramp" not in data:
            raise OracleConfigError("oracle spec needs a table or a ramp")
        try:
            return cls(
                class_count=int(data["class_count"]),
                table=dict(data.get("table") or {}),
                mode=data.get("mode", "deterministic-hash"),
                seed=int(data.get("seed", 0)),
                ramp=Ramp.from_dict(data["ramp"]) if data.get("ramp") is not None else None,
            )
        except KeyError as exc:
            raise OracleConfigError(f"oracle spec is missing {exc}") from None

    @classmethod
    def load(cls, path) -> "OracleSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def probability(self, source_class: int, mr, param=None) -> float:
        mr = MR.parse(mr)
        cell = self._cells.get((str(source_class), mr), self._cells.get(("*", mr)))
        if cell is None:
            if self.ramp is not None and mr.parameterized:
                cell = self.ramp
            else:
                raise OracleConfigError(f"no oracle entry for class {source_class}, {mr.value}")
        if not mr.parameterized:
            return cell
        return cell(bucket(param))

    def validate(self) -> None:
        """Every class must resolve every relation and grid step."""
        for c in range(self.class_count):
            for mr in MR:
                if mr.parameterized:
                    for p in param_grid(mr):
                        self.probability(c, mr, p)
                else:
                    self.probability(c, mr)


def bucket(param) -> int:
    """|param| rounded to the nearest grid step."""
    if param is None:
        raise OracleConfigError("parameterized relation queried without a parameter")
    return max(GRID_STEP, int(round(abs(float(param)) / GRID_STEP)) * GRID_STEP)


def hash_unit(seed: int, source_id: str, mr, param) -> float:
    """Seeded 64-bit hash of the arguments mapped to [0, 1)."""
    key = f"{seed}\x1f{source_id}\x1f{MR.parse(mr).value}\x1f{param}".encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0 ** 64


def oracle_violates(spec: OracleSpec, source_id: str, source_class: int, mr, param=None,
                    rng: np.random.Generator | None = None) -> bool:
    p = spec.probability(source_class, mr, param)
    if spec.mode == "deterministic-hash":
        return hash_unit(spec.seed, source_id, mr, param) < p
    if rng is None:
        raise ValueError("bernoulli oracle needs a random generator")
    return bool(rng.random() < p)


class OracleSUT:
    """Classifier/detector whose failures follow an :class:`OracleSpec`.

    Sources get their assigned label (classification) or their ground
    truth at score 1 (detection).  A violated follow-up answers
    ``(label + 1) mod C`` or no detections at all.
    """

    def __init__(self, spec: OracleSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)

    def execute(self, request: SutRequest) -> SutOutput:
        cls = request.source_class
        if cls is None:
            cls = request.annotations[0].class_id if request.annotations else 0
        violated = False
        if request.relation is not None:
            mr, param = request.relation
            violated = oracle_violates(self.spec, request.source_id, cls, mr, param, self.rng)
        if request.task == "classification":
            return SutOutput(label=(cls + 1) % self.spec.class_count if violated else cls)
        if violated:
            return SutOutput(detections=())
        return SutOutput(detections=tuple(Detection(t.box, t.class_id, 1.0) for t in request.annotations))

    def close(self):
        pass


# ------------------------------------------------------------- external

class ExternalSUT:
    """Child process answering one JSON request line with one JSON response line."""

    def __init__(self, command, timeout: float = 30.0, cwd=None, env=None):
        if isinstance(command, str):
            command = [command]
        self.command = list(command)
        self.timeout = float(timeout)
        self.cwd = cwd
        self.env = env
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._tmp = tempfile.TemporaryDirectory(prefix="adaptmt-sut-")
        self._counter = 0
        self._start()

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1, cwd=self.cwd, env=self.env)
        except OSError as exc:
            raise SutError(f"cannot start SUT {self.command!r}: {exc}") from exc
        lines: queue.Queue = queue.Queue()
        stdout = self._proc.stdout

        def pump():
            for line in stdout:
                lines.put(line)
            lines.put(None)

        threading.Thread(target=pump, daemon=True).start()
        self._lines = lines

    def _kill(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None
            self._lines = None

    def execute(self, request: SutRequest) -> SutOutput:
        if self._proc is None or self._proc.poll() is not None:
            self._kill()
            self._start()
        self._counter += 1
        req_id = f"{request.source_id}#{self._counter}"
        image_path = os.path.join(self._tmp.name, f"{self._counter % 2}.ppm")
        write_ppm(image_path, request.image)
        message = {"id": req_id, "task": request.task, "image_path": image_path}
        if request.annotations is not None:
            message["annotations"] = [t.to_json() for t in request.annotations]
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise SutError(f"SUT stdin closed: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._kill()
            raise SutError(f"SUT did not answer within {self.timeout:g} s") from None
        if line is None:
            self._kill()
            raise SutError("SUT exited without answering")
        try:
            reply = json.loads(line)
            if not isinstance(reply, dict):
                raise ValueError("reply is not an object")
        except ValueError as exc:
            self._kill()
            raise SutError(f"protocol error: {line.strip()[:80]!r} ({exc})") from None
        if "id" in reply and reply["id"] != req_id:
            self._kill()
            raise SutError(f"protocol error: reply id {reply['id']!r} != {req_id!r}")
        try:
            if request.task == "classification":
                return SutOutput(label=int(reply["label"]))
            return SutOutput(detections=tuple(Detection.from_json(d) for d in reply["detections"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SutError(f"protocol error: malformed reply {reply!r}") from exc

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                pass
            self._kill()
        self._tmp.cleanup()


def execute(sut, request: SutRequest) -> SutOutput:
    return sut.execute(request)


def rates_spec(mode: str = "bernoulli", seed: int = 0, per_class: bool = False) -> OracleSpec:
    """Oracle from the reference rates; ``per_class`` selects class cells over the average column."""
    if per_class:
        table = {str(c): {mr: CLASS_RATES[mr][c] / 100.0 for mr in CLASS_RATES} for c in range(10)}
    else:
        table = {"*": {mr: p / 100.0 for mr, p in AVERAGE_RATES.items()}}
    return OracleSpec(class_count=10, table=table, mode=mode, seed=seed)


def ramp_spec(mode: str = "bernoulli", seed: int = 0, p0=0.1, slope=0.01, p_max=0.95,
              class_count: int = 10) -> OracleSpec:
    """Ramp oracle for boundary runs; plain relations never violate."""
    table = {"*": {mr.value: 0.0 for mr in MR if not mr.parameterized}}
    return OracleSpec(class_count=class_count, table=table, mode=mode, seed=seed,
                      ramp=Ramp(p0, slope, p_max))
