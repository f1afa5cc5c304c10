"""Bernoulli uplinks and heterogeneity schedules.

A schedule maps a round index to per-client ``(local steps, failure
probability)`` arrays.  Random schedules are pure functions of
``(seed, client, round)``: every round gets its own generator derived from
the seed, and client ``m`` always consumes the same slice of that stream, so
replaying a round or changing the population size never changes client
``m``'s draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BadSchedule, ValidationError

_STATIC_TAG = 0
_PER_ROUND_TAG = 1


def transmit(selected: Sequence[int], failure: ArrayLike, rng: np.random.Generator) -> list[int]:
    """Pass each selected instance through its client's link.

    Every instance draws its own Bernoulli, so a client sampled twice may get
    one copy through and lose the other.
    """
    sel = np.asarray(selected, dtype=np.int64)
    q = np.asarray(failure, dtype=np.float64)
    if np.any(q < 0) or np.any(q >= 1):
        raise BadSchedule(f"failure probabilities must lie in [0, 1): {q}")
    u = rng.random(sel.size)
    return sel[delivery_mask(sel, q, u)].tolist()


def delivery_mask(selected: NDArray[np.int64], failure: NDArray[np.float64], u: NDArray[np.float64]) -> NDArray[np.bool_]:
    """Instance ``i`` gets through iff ``u[i] >= q[selected[i]]``.

    Works on any leading batch shape shared by ``selected`` and ``u``;
    ``failure`` may carry the same batch shape with a trailing client axis.
    """
    if failure.ndim == 1:
        return u >= failure[selected]
    return u >= np.take_along_axis(failure, selected, axis=-1)


class Schedule:
    """Base class: per-round ``(steps, failure)`` for ``clients`` clients."""

    clients: int

    def values(self, round_: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        raise NotImplementedError

    @property
    def max_steps(self) -> int:
        raise NotImplementedError

    @property
    def is_static(self) -> bool:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


def _frozen(a: ArrayLike, dtype: Any) -> NDArray[Any]:
    arr = np.array(a, dtype=dtype, ndmin=1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StaticSchedule(Schedule):
    steps: NDArray[np.int64]
    failure: NDArray[np.float64]

    def __post_init__(self) -> None:
        steps = np.array(self.steps, ndmin=1)
        if steps.dtype.kind == "f" and np.any(steps != np.round(steps)):
            raise BadSchedule(f"local steps must be integers: {steps}")
        steps = _frozen(steps, np.int64)
        fail = _frozen(self.failure, np.float64)
        if steps.size == 1 and fail.size > 1:
            steps = _frozen(np.full(fail.size, steps[0]), np.int64)
        if fail.size == 1 and steps.size > 1:
            fail = _frozen(np.full(steps.size, fail[0]), np.float64)
        if steps.shape != fail.shape:
            raise ValidationError(f"steps {steps.shape} and failure {fail.shape} disagree in length")
        if np.any(steps < 1):
            raise BadSchedule(f"local steps must be >= 1: {steps}")
        if np.any(fail < 0) or np.any(fail >= 1) or not np.all(np.isfinite(fail)):
            raise BadSchedule(f"failure probabilities must lie in [0, 1): {fail}")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "failure", fail)

    @property
    def clients(self) -> int:  # type: ignore[override]
        return self.steps.size

    def values(self, round_: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        return self.steps, self.failure

    @property
    def max_steps(self) -> int:
        return int(self.steps.max())

    @property
    def is_static(self) -> bool:
        return True

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "static", "steps": self.steps.tolist(), "failure": self.failure.tolist()}


@dataclass(frozen=True, eq=False)
class RangeSchedule(Schedule):
    """Independent uniform draws from per-client ranges.

    Steps are uniform over the inclusive integer range, failure probability
    uniform over the real interval.  With ``per_round`` false the draw happens
    once and holds for every round.
    """

    steps_lo: NDArray[np.int64]
    steps_hi: NDArray[np.int64]
    failure_lo: NDArray[np.float64]
    failure_hi: NDArray[np.float64]
    per_round: bool
    seed: int

    def __post_init__(self) -> None:
        arrs = [
            _frozen(self.steps_lo, np.int64),
            _frozen(self.steps_hi, np.int64),
            _frozen(self.failure_lo, np.float64),
            _frozen(self.failure_hi, np.float64),
        ]
        if len({a.shape for a in arrs}) != 1:
            raise ValidationError("range arrays must share one length")
        slo, shi, flo, fhi = arrs
        if np.any(slo < 1) or np.any(shi < slo):
            raise BadSchedule(f"invalid step ranges [{slo}, {shi}]")
        if np.any(flo < 0) or np.any(fhi < flo) or np.any(fhi >= 1):
            raise BadSchedule(f"failure ranges must satisfy 0 <= lo <= hi < 1: [{flo}, {fhi}]")
        if self.seed < 0:
            raise ValidationError("schedule seed must be non-negative")
        for name, a in zip(("steps_lo", "steps_hi", "failure_lo", "failure_hi"), arrs):
            object.__setattr__(self, name, a)
        object.__setattr__(self, "_cache", {})

    @property
    def clients(self) -> int:  # type: ignore[override]
        return self.steps_lo.size

    def _draw(self, entropy: list[int]) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        u = rng.random((self.clients, 2))
        span = self.steps_hi - self.steps_lo + 1
        steps = np.minimum(self.steps_lo + np.floor(u[:, 0] * span).astype(np.int64), self.steps_hi)
        fail = self.failure_lo + u[:, 1] * (self.failure_hi - self.failure_lo)
        return _frozen(steps, np.int64), _frozen(fail, np.float64)

    def values(self, round_: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        key = round_ if self.per_round else -1
        cache: dict[int, Any] = self._cache  # type: ignore[attr-defined]
        hit = cache.get(key)
        if hit is None:
            entropy = [self.seed, _PER_ROUND_TAG, round_] if self.per_round else [self.seed, _STATIC_TAG]
            hit = self._draw(entropy)
            if len(cache) > 4:
                cache.clear()
            cache[key] = hit
        return hit

    @property
    def max_steps(self) -> int:
        return int(self.steps_hi.max())

    @property
    def is_static(self) -> bool:
        return not self.per_round

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "range",
            "steps_lo": self.steps_lo.tolist(),
            "steps_hi": self.steps_hi.tolist(),
            "failure_lo": self.failure_lo.tolist(),
            "failure_hi": self.failure_hi.tolist(),
            "per_round": self.per_round,
            "seed": self.seed,
        }


def schedule_static(steps: ArrayLike, failure: ArrayLike, clients: int = 1) -> StaticSchedule:
    """Constant schedule; scalar arguments are broadcast to ``clients``."""
    s = np.array(steps, ndmin=1)
    f = np.array(failure, dtype=np.float64, ndmin=1)
    if s.size == 1 and f.size == 1:
        s, f = np.full(clients, s[0]), np.full(clients, f[0])
    return StaticSchedule(s, f)


def schedule_uniform_random(
    clients: int,
    steps_range: tuple[int, int],
    failure_range: tuple[float, float],
    per_round: bool,
    seed: int,
) -> RangeSchedule:
    ones = np.ones(clients)
    return RangeSchedule(
        steps_range[0] * ones,
        steps_range[1] * ones,
        failure_range[0] * ones,
        failure_range[1] * ones,
        per_round,
        seed,
    )


def schedule_two_group(
    clients: int,
    split: int,
    first: tuple[tuple[int, int], tuple[float, float]],
    second: tuple[tuple[int, int], tuple[float, float]],
    seed: int,
    per_round: bool = True,
) -> RangeSchedule:
    """Clients ``[0, split)`` draw from ``first``'s ranges, the rest from ``second``'s.

    Each argument is ``(steps_range, failure_range)``.
    """
    if not 0 <= split <= clients:
        raise ValidationError(f"split {split} outside [0, {clients}]")
    groups = np.arange(clients) < split

    def pick(i: int, j: int) -> NDArray[np.float64]:
        return np.where(groups, first[i][j], second[i][j])

    return RangeSchedule(pick(0, 0), pick(0, 1), pick(1, 0), pick(1, 1), per_round, seed)


def schedule_from_dict(d: Mapping[str, Any]) -> Schedule:
    kind = d.get("kind")
    if kind == "static":
        return StaticSchedule(d["steps"], d["failure"])
    if kind == "range":
        return RangeSchedule(
            d["steps_lo"], d["steps_hi"], d["failure_lo"], d["failure_hi"], bool(d["per_round"]), int(d["seed"])
        )
    raise ValidationError(f"unknown schedule kind {kind!r}")
