"""Contextual bandit core.

A :class:`BanditCore` owns one reward scorer (epsilon-greedy) or ``m``
scorers (online cover), an exploration strategy that reports the exact
probability of every arm it returns, and a doubly-robust update rule.

The update regresses each scorer toward doubly-robust targets.  For the
taken arm the target is ``pred + (reward - pred) / propensity``, which is
the importance-weighted squared-loss gradient toward the observed reward.
Plain SGD on that target diverges for exploration arms (the importance
weight reaches ``k / epsilon``), so each step is integrated in closed form
along the normalized gradient direction, with a per-arm learning rate
``lr / (1 + lr * mass)`` that decays with the importance mass the arm has
absorbed::

    pred_new = pred + weight / (1 / lr + mass + weight) * (reward - pred)

For small importance weights this is the SGD step on the doubly-robust
target, and the prediction never overshoots the observed reward.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "BanditCore",
    "ExplorationConfig",
    "LinearScorer",
    "MLPScorer",
    "Observation",
    "SnapshotError",
    "argmax_lowest",
    "dr_targets",
    "make_scorer",
    "predict",
]

SCHEMA_VERSION = 1
HIDDEN_UNITS = 16
COVER_BONUS = 0.1


class SnapshotError(ValueError):
    """Raised when a serialized bandit cannot be loaded."""


@dataclass(frozen=True)
class Observation:
    context: np.ndarray
    action: int
    reward: float
    propensity: float

    def __post_init__(self):
        if not (self.propensity > 0.0) or self.propensity > 1.0 + 1e-12:
            raise ValueError(f"propensity must lie in (0, 1], got {self.propensity}")
        if not math.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")


@dataclass(frozen=True)
class ExplorationConfig:
    strategy: str = "epsilon-greedy"
    epsilon: float = 0.1
    cover_size: int = 3
    scorer: str = "linear"
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.strategy not in ("epsilon-greedy", "cover"):
            raise ValueError(f"unknown exploration strategy {self.strategy!r}")
        # epsilon = 1 (pure exploration) is allowed for estimation runs
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.cover_size < 1:
            raise ValueError("cover size must be >= 1")
        if self.scorer not in ("linear", "mlp"):
            raise ValueError(f"unknown scorer kind {self.scorer!r}")
        if not self.learning_rate > 0.0:
            raise ValueError("learning rate must be positive")

    @property
    def policy_count(self) -> int:
        return self.cover_size if self.strategy == "cover" else 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExplorationConfig":
        known = {"strategy", "epsilon", "cover_size", "scorer", "learning_rate"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown exploration keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "epsilon": self.epsilon,
            "cover_size": self.cover_size,
            "scorer": self.scorer,
            "learning_rate": self.learning_rate,
        }


def argmax_lowest(scores: Sequence[float]) -> int:
    """Index of the maximum score; ties go to the lowest index."""
    # np.argmax already returns the first occurrence
    return int(np.argmax(np.asarray(scores)))


def _as_context(context, n: int) -> np.ndarray:
    x = np.asarray(context, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise ValueError(f"context has shape {x.shape}, expected ({n},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("context contains non-finite values")
    return x


class LinearScorer:
    """Per-arm linear regression ``score[a] = weights[a] . x``."""

    kind = "linear"

    def __init__(self, n: int, k: int, weights: np.ndarray | None = None):
        self.n = n
        self.k = k
        self.weights = np.zeros((k, n)) if weights is None else np.array(weights, dtype=np.float64)
        if self.weights.shape != (k, n):
            raise ValueError(f"weights have shape {self.weights.shape}, expected {(k, n)}")

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.weights @ x

    def step(self, x: np.ndarray, arm: int, delta: float) -> None:
        """Move ``score[arm]`` at ``x`` by exactly ``delta``."""
        xx = float(x @ x)
        if xx == 0.0 or delta == 0.0:
            return
        self.weights[arm] += (delta / xx) * x

    def params(self) -> dict:
        return {"weights": self.weights.tolist()}

    @classmethod
    def from_params(cls, n: int, k: int, params: dict) -> "LinearScorer":
        return cls(n, k, np.asarray(params["weights"], dtype=np.float64))

    def copy(self) -> "LinearScorer":
        return LinearScorer(self.n, self.k, self.weights.copy())


class MLPScorer:
    """One tanh hidden layer of 16 units feeding a linear output per arm."""

    kind = "mlp"

    def __init__(self, n: int, k: int, hidden=None, hidden_bias=None, out=None, out_bias=None, seed: int = 0):
        self.n = n
        self.k = k
        if hidden is None:
            rng = np.random.default_rng(seed)
            hidden = rng.uniform(-0.05, 0.05, size=(HIDDEN_UNITS, n))
            out = rng.uniform(-0.05, 0.05, size=(k, HIDDEN_UNITS))
            hidden_bias = np.zeros(HIDDEN_UNITS)
            out_bias = np.zeros(k)
        self.hidden = np.array(hidden, dtype=np.float64)
        self.hidden_bias = np.array(hidden_bias, dtype=np.float64)
        self.out = np.array(out, dtype=np.float64)
        self.out_bias = np.array(out_bias, dtype=np.float64)
        if self.hidden.shape != (HIDDEN_UNITS, n) or self.out.shape != (k, HIDDEN_UNITS):
            raise ValueError("MLP weight shapes do not match (n, k)")

    def _activations(self, x):
        return np.tanh(self.hidden @ x + self.hidden_bias)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.out @ self._activations(x) + self.out_bias

    def step(self, x: np.ndarray, arm: int, delta: float) -> None:
        """Normalized gradient step changing ``score[arm]`` by ``delta`` to first order."""
        if delta == 0.0:
            return
        h = self._activations(x)
        g_out = h
        g_hidden_pre = self.out[arm] * (1.0 - h * h)
        norm = float(g_out @ g_out) + 1.0 + float(g_hidden_pre @ g_hidden_pre) * (float(x @ x) + 1.0)
        scale = delta / norm
        self.hidden += scale * np.outer(g_hidden_pre, x)
        self.hidden_bias += scale * g_hidden_pre
        self.out[arm] += scale * g_out
        self.out_bias[arm] += scale

    def params(self) -> dict:
        return {
            "hidden": self.hidden.tolist(),
            "hidden_bias": self.hidden_bias.tolist(),
            "out": self.out.tolist(),
            "out_bias": self.out_bias.tolist(),
        }

    @classmethod
    def from_params(cls, n: int, k: int, params: dict) -> "MLPScorer":
        return cls(n, k, params["hidden"], params["hidden_bias"], params["out"], params["out_bias"])

    def copy(self) -> "MLPScorer":
        return MLPScorer(self.n, self.k, self.hidden.copy(), self.hidden_bias.copy(),
                         self.out.copy(), self.out_bias.copy())


def make_scorer(kind: str, n: int, k: int, seed: int = 0):
    if kind == "linear":
        return LinearScorer(n, k)
    if kind == "mlp":
        return MLPScorer(n, k, seed=seed)
    raise ValueError(f"unknown scorer kind {kind!r}")


def predict(model, context) -> np.ndarray:
    """Score every arm for ``context``; raises ValueError on a dimension mismatch."""
    return model.predict(_as_context(context, model.n))


def dr_targets(obs: Observation, predicted: Sequence[float]) -> np.ndarray:
    """Doubly-robust regression targets for one logged observation.

    >>> dr_targets(Observation(np.zeros(1), 0, 1.0, 0.5), [0.5, 0.2]).tolist()
    [1.5, 0.2]
    """
    if not obs.propensity > 0.0:
        raise ValueError("propensity must be positive")
    targets = np.array(predicted, dtype=np.float64)
    a = obs.action
    targets[a] = targets[a] + (obs.reward - targets[a]) / obs.propensity
    return targets


class BanditCore:
    """k-armed contextual bandit over n-dimensional contexts.

    Selection draws from the core's own PCG64 stream, so the decision
    sequence is a pure function of the snapshot state and the inputs.
    """

    def __init__(self, n: int, k: int, config: ExplorationConfig | None = None,
                 seed: int = 0, scorers=None, rng_state: dict | None = None, mass=None):
        if n < 1 or k < 1:
            raise ValueError("n and k must be positive")
        self.n = n
        self.k = k
        self.config = config or ExplorationConfig()
        self.seed = seed
        m = self.config.policy_count
        if scorers is None:
            scorers = [make_scorer(self.config.scorer, n, k, seed=seed * 1000 + j) for j in range(m)]
        if len(scorers) != m:
            raise ValueError(f"expected {m} scorers, got {len(scorers)}")
        self.scorers = list(scorers)
        self.mass = (np.zeros((len(self.scorers), k)) if mass is None
                     else np.array(mass, dtype=np.float64).reshape(len(self.scorers), k))
        self.rng = np.random.Generator(np.random.PCG64(seed))
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def check_context(self, context) -> np.ndarray:
        return _as_context(context, self.n)

    def predict(self, context, policy: int = 0) -> np.ndarray:
        return self.scorers[policy].predict(self.check_context(context))

    def greedy_arms(self, context) -> list[int]:
        x = self.check_context(context)
        return [argmax_lowest(s.predict(x)) for s in self.scorers]

    def distribution(self, context) -> np.ndarray:
        """Probability of every arm under the current selection rule."""
        eps, k = self.epsilon, self.k
        probs = np.full(k, eps / k)
        greedy = self.greedy_arms(context)
        for arm in greedy:
            probs[arm] += (1.0 - eps) / len(greedy)
        return probs

    def select(self, context) -> tuple[int, float]:
        if self.config.strategy == "cover":
            return self.select_cover(context)
        return self.select_epsilon_greedy(context)

    def select_epsilon_greedy(self, context) -> tuple[int, float]:
        if self.config.strategy != "epsilon-greedy":
            raise ValueError("core is not configured for epsilon-greedy")
        eps, k = self.epsilon, self.k
        greedy = self.greedy_arms(context)[0]
        if eps > 0.0 and self.rng.random() < eps:
            arm = int(self.rng.integers(k))
        else:
            arm = greedy
        propensity = 1.0 - eps + eps / k if arm == greedy else eps / k
        return arm, propensity

    def select_cover(self, context) -> tuple[int, float]:
        if self.config.strategy != "cover":
            raise ValueError("core is not configured for cover")
        eps, k = self.epsilon, self.k
        greedy = self.greedy_arms(context)
        if eps > 0.0 and self.rng.random() < eps:
            arm = int(self.rng.integers(k))
        else:
            arm = greedy[int(self.rng.integers(len(greedy)))]
        propensity = (1.0 - eps) * greedy.count(arm) / len(greedy) + eps / k
        return arm, propensity

    def update(self, obs: Observation) -> "BanditCore":
        """One doubly-robust step per policy; mutates and returns ``self``."""
        x = self.check_context(obs.context)
        if not 0 <= obs.action < self.k:
            raise ValueError(f"action {obs.action} outside [0, {self.k})")
        if not math.isfinite(obs.reward):
            raise ValueError("reward must be finite")
        a = obs.action
        weight = 1.0 / obs.propensity

        base_pred = self.scorers[0].predict(x)
        targets = dr_targets(obs, base_pred)
        if len(self.scorers) > 1:
            probs = self.distribution(x)
            floor = self.epsilon / self.k if self.epsilon > 0 else 1.0 / self.k
            greedy = [argmax_lowest(s.predict(x)) for s in self.scorers]

        for j, scorer in enumerate(self.scorers):
            pred = base_pred if j == 0 else scorer.predict(x)
            mass = self.mass[j]
            # (target - pred) / weight is the residual toward the observed reward
            residual = (targets[a] - pred[a]) / weight if j == 0 else obs.reward - pred[a]
            scorer.step(x, a, self._fraction(mass[a], weight) * residual)
            mass[a] += weight
            if j == 0:
                continue
            chosen_before = set(greedy[:j])
            for b in range(self.k):
                if b == a or b in chosen_before:
                    continue
                bonus_target = targets[b] + COVER_BONUS / max(probs[b], floor)
                scorer.step(x, b, self._fraction(mass[b], 1.0) * (bonus_target - pred[b]))
                mass[b] += 1.0
        return self

    def _fraction(self, mass: float, weight: float) -> float:
        """Share of the residual removed by an observation of importance ``weight``.

        Integrates ``d pred = lr / (1 + lr * tau) * (y - pred) d tau`` over
        ``tau`` in ``[mass, mass + weight]``.
        """
        prior = 1.0 / self.config.learning_rate
        return weight / (prior + mass + weight)

    # -- persistence -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "adaptmt-bandit",
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "k": self.k,
            "m": len(self.scorers),
            "strategy": self.config.strategy,
            "epsilon": self.config.epsilon,
            "scorer": self.config.scorer,
            "learning_rate": self.config.learning_rate,
            "seed": self.seed,
            "rng_state": _rng_state_to_json(self.rng.bit_generator.state),
            "policies": [s.params() for s in self.scorers],
            "importance_mass": self.mass.tolist(),
        }

    def snapshot(self) -> bytes:
        return canonical_bytes(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "BanditCore":
        try:
            if data.get("format") != "adaptmt-bandit":
                raise SnapshotError("payload is not a bandit snapshot")
            if data.get("schema_version") != SCHEMA_VERSION:
                raise SnapshotError(
                    f"snapshot schema version {data.get('schema_version')} != {SCHEMA_VERSION}")
            n, k, m = int(data["n"]), int(data["k"]), int(data["m"])
            config = ExplorationConfig(
                strategy=data["strategy"],
                epsilon=float(data["epsilon"]),
                cover_size=m if data["strategy"] == "cover" else 3,
                scorer=data["scorer"],
                learning_rate=float(data["learning_rate"]),
            )
            scorer_cls = LinearScorer if config.scorer == "linear" else MLPScorer
            scorers = [scorer_cls.from_params(n, k, p) for p in data["policies"]]
            return cls(n, k, config, seed=int(data["seed"]), scorers=scorers,
                       rng_state=_rng_state_from_json(data["rng_state"]),
                       mass=data["importance_mass"])
        except SnapshotError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt bandit snapshot: {exc}") from exc

    @classmethod
    def load(cls, payload: bytes) -> "BanditCore":
        return cls.from_dict(parse_canonical(payload))

    def copy(self) -> "BanditCore":
        return BanditCore.from_dict(self.to_dict())


def _rng_state_to_json(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": format(state["state"]["state"], "x"),
        "inc": format(state["state"]["inc"], "x"),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _rng_state_from_json(data: dict) -> dict:
    return {
        "bit_generator": data["bit_generator"],
        "state": {"state": int(data["state"], 16), "inc": int(data["inc"], 16)},
        "has_uint32": data["has_uint32"],
        "uinteger": data["uinteger"],
    }


def canonical_bytes(body: dict) -> bytes:
    """Canonical JSON with an embedded sha256 of the body."""
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)
    digest = hashlib.sha256(text.encode()).hexdigest()
    return json.dumps({"body": body, "sha256": digest}, sort_keys=True,
                      separators=(",", ":"), allow_nan=False).encode() + b"\n"


def parse_canonical(payload: bytes) -> dict:
    try:
        wrapper = json.loads(payload)
        body = wrapper["body"]
        digest = wrapper["sha256"]
    except (ValueError, KeyError, TypeError) as exc:
        raise SnapshotError(f"unreadable snapshot payload: {exc}") from exc
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)
    if hashlib.sha256(text.encode()).hexdigest() != digest:
        raise SnapshotError("snapshot checksum mismatch")
    return body
