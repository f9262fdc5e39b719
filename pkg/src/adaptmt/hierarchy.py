"""Main bandit over relations plus one parameter bandit per parameterized relation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .bandit import (
    BanditCore,
    ExplorationConfig,
    Observation,
    SnapshotError,
    canonical_bytes,
    parse_canonical,
)
from .relations import GRID_STEP, MR, MR_ORDER, param_grid, registry_signature
from .verdicts import Verdict

TOP_PARAM_REWARD = 10000.0


@dataclass(frozen=True)
class RelationChoice:
    mr: MR
    param: int | None
    main_propensity: float
    param_propensity: float | None = None

    def __post_init__(self):
        if self.mr.parameterized != (self.param is not None):
            raise ValueError(f"{self.mr.value} param presence mismatch: {self.param!r}")
        if self.param is not None and self.param not in param_grid(self.mr):
            raise ValueError(f"{self.param} is not on the {self.mr.value} grid")


def registry_hash() -> str:
    return hashlib.sha256(registry_signature().encode()).hexdigest()[:16]


def main_reward(verdict: Verdict) -> float:
    return 1.0 if verdict == Verdict.VIOLATED else 0.0


def param_reward(param: int, verdict: Verdict, mr=MR.ROTATION) -> float:
    """10000 for the smallest step, halved for every further 5 degrees."""
    if param not in param_grid(mr):
        raise ValueError(f"{param} is not on the {MR.parse(mr).value} grid")
    if verdict != Verdict.VIOLATED:
        return 0.0
    step = abs(param) // GRID_STEP
    return TOP_PARAM_REWARD / 2 ** (step - 1)


class HierarchyState:
    """Main bandit (7 arms) and parameter bandits for Rotation (36) and Shear (18)."""

    def __init__(self, n: int, config: ExplorationConfig | None = None, seed: int = 0,
                 main: BanditCore | None = None, params: dict | None = None):
        self.n = n
        self.config = config or ExplorationConfig()
        seeds = np.random.SeedSequence(seed).generate_state(3)
        self.main = main or BanditCore(n, len(MR_ORDER), self.config, seed=int(seeds[0]))
        if params is None:
            params = {
                MR.ROTATION: BanditCore(n, len(param_grid(MR.ROTATION)), self.config, seed=int(seeds[1])),
                MR.SHEAR: BanditCore(n, len(param_grid(MR.SHEAR)), self.config, seed=int(seeds[2])),
            }
        self.params: dict[MR, BanditCore] = params
        for core in (self.main, *self.params.values()):
            if core.n != n:
                raise ValueError("all bandits in a hierarchy share one context dimension")

    def select_relation(self, context) -> RelationChoice:
        arm, main_p = self.main.select(context)
        mr = MR_ORDER[arm]
        if not mr.parameterized:
            return RelationChoice(mr, None, main_p)
        return self.select_param(mr, context, main_p)

    def select_param(self, mr: MR, context, main_propensity: float = 1.0) -> RelationChoice:
        idx, param_p = self.params[mr].select(context)
        return RelationChoice(mr, param_grid(mr)[idx], main_propensity, param_p)

    def update(self, context, choice: RelationChoice, verdict: Verdict, update_main: bool = True):
        if update_main:
            self.main.update(Observation(np.asarray(context, dtype=np.float64), MR_ORDER.index(choice.mr),
                                         main_reward(verdict), choice.main_propensity))
        if choice.mr.parameterized:
            grid = param_grid(choice.mr)
            self.params[choice.mr].update(Observation(
                np.asarray(context, dtype=np.float64), grid.index(choice.param),
                param_reward(choice.param, verdict, choice.mr), choice.param_propensity))
        return self

    # -- persistence -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "adaptmt-hierarchy",
            "registry": registry_hash(),
            "n": self.n,
            "exploration": self.config.to_dict(),
            "bandits": {
                "main": self.main.to_dict(),
                **{mr.value: core.to_dict() for mr, core in self.params.items()},
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchyState":
        if data.get("format") != "adaptmt-hierarchy":
            raise SnapshotError("payload is not a hierarchy snapshot")
        if data.get("registry") != registry_hash():
            raise SnapshotError("snapshot was written for a different relation registry")
        try:
            bandits = data["bandits"]
            main = BanditCore.from_dict(bandits["main"])
            params = {mr: BanditCore.from_dict(bandits[mr.value]) for mr in (MR.ROTATION, MR.SHEAR)}
            config = ExplorationConfig.from_dict(data["exploration"])
            return cls(int(data["n"]), config, main=main, params=params)
        except (KeyError, TypeError) as exc:
            raise SnapshotError(f"corrupt hierarchy snapshot: {exc}") from exc

    def snapshot(self) -> bytes:
        return canonical_bytes(self.to_dict())

    @classmethod
    def load(cls, payload: bytes) -> "HierarchyState":
        return cls.from_dict(parse_canonical(payload))
