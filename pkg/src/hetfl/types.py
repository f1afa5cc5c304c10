"""Domain types shared across the simulator.

Everything here is immutable after construction.  Model vectors are plain
``float64`` numpy arrays; :func:`as_model_vector` is the single gate that
checks them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BadSchedule, DuplicateId, NumericalBlowup, ValidationError, WeightSumError

if TYPE_CHECKING:
    from .channel import Schedule

ModelVector = NDArray[np.float64]

WEIGHT_SUM_TOL = 1e-12


def as_model_vector(x: ArrayLike, *, what: str = "model vector") -> ModelVector:
    arr = np.array(x, dtype=np.float64, ndmin=1)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalBlowup(f"{what} has non-finite entries: {arr}")
    return arr


class Algorithm(str, Enum):
    """Server-side algorithm: a fixed pairing of sampler and aggregator."""

    FEDAVG = "FedAvg"
    FEDACS = "FedACS"
    CA_FEDAVG = "CaFedAvg"
    FEDVARP = "FedVarp"
    FEDNOVA = "FedNova"
    OPTIMAL_SAMPLING = "OptimalSampling"


class SolverKind(str, Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    PROXIMAL = "proximal"
    DECAYED = "decayed"


@dataclass(frozen=True)
class SolverSpec:
    """Local optimizer choice.

    ``param`` is the momentum factor, proximal weight or per-step decay rate
    depending on ``kind``; it is ignored for plain SGD.
    """

    kind: SolverKind = SolverKind.SGD
    param: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SolverKind(self.kind))
        p = float(self.param)
        object.__setattr__(self, "param", p)
        if self.kind is SolverKind.SGD:
            object.__setattr__(self, "param", 0.0)
        elif self.kind is SolverKind.PROXIMAL:
            if not p >= 0.0:
                raise ValidationError(f"proximal weight must be >= 0, got {p}")
        elif not 0.0 <= p < 1.0:
            raise ValidationError(f"{self.kind.value} parameter must lie in [0, 1), got {p}")

    @classmethod
    def sgd(cls) -> SolverSpec:
        return cls(SolverKind.SGD)

    @classmethod
    def momentum(cls, rho: float) -> SolverSpec:
        return cls(SolverKind.MOMENTUM, rho)

    @classmethod
    def proximal(cls, mu: float) -> SolverSpec:
        return cls(SolverKind.PROXIMAL, mu)

    @classmethod
    def decayed(cls, gamma: float) -> SolverSpec:
        return cls(SolverKind.DECAYED, gamma)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "param": self.param}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SolverSpec:
        return cls(SolverKind(d["kind"]), d.get("param", 0.0))


@dataclass(frozen=True)
class AccumulationVector:
    """Per-step gradient coefficients of one local run and their sum."""

    coeffs: NDArray[np.float64]
    l1: float = field(default=math.nan)

    def __post_init__(self) -> None:
        c = np.array(self.coeffs, dtype=np.float64, ndmin=1)
        if c.ndim != 1 or c.size == 0:
            raise ValidationError("accumulation vector needs at least one coefficient")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValidationError(f"accumulation coefficients must be finite and >= 0: {c}")
        c.setflags(write=False)
        total = math.fsum(c)
        if math.isnan(self.l1):
            object.__setattr__(self, "l1", total)
        elif abs(self.l1 - total) > 1e-12 * max(1.0, total):
            raise ValidationError(f"l1 {self.l1} does not match coefficient sum {total}")
        if not self.l1 > 0:
            raise ValidationError("accumulation vector must have positive l1 norm")
        object.__setattr__(self, "coeffs", c)

    def __len__(self) -> int:
        return self.coeffs.size


@dataclass(frozen=True)
class SurrogateStats:
    """Round-level quantities of the objective actually being minimized.

    ``eta_eff`` is a unitless factor; multiply by the learning rate to get
    the effective learning rate.
    """

    gamma: NDArray[np.float64]
    omega_eff: NDArray[np.float64]
    eta_eff: float
    t_eff: float
    chi_square: float


@dataclass(frozen=True)
class ClientProfile:
    id: int
    weight: float
    schedule: Schedule
    solver: SolverSpec = SolverSpec()

    def link_schedule(self, round_: int) -> float:
        """Failure probability of this client's uplink at ``round_``."""
        return float(self.schedule.values(round_)[1][self.id])

    def solver_schedule(self, round_: int) -> tuple[SolverSpec, int]:
        return self.solver, int(self.schedule.values(round_)[0][self.id])

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "weight": self.weight,
            "schedule": self.schedule.to_dict(),
            "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ClientProfile:
        from .channel import schedule_from_dict

        return cls(
            id=int(d["id"]),
            weight=float(d["weight"]),
            schedule=schedule_from_dict(d["schedule"]),
            solver=SolverSpec.from_dict(d["solver"]),
        )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    delivered: tuple[int, ...]
    update: ModelVector
    metrics: Mapping[str, float]

    def __post_init__(self) -> None:
        remaining = list(self.selected)
        for m in self.delivered:
            try:
                remaining.remove(m)
            except ValueError:
                raise ValidationError(
                    f"round {self.round}: delivered {self.delivered} not within selected {self.selected}"
                ) from None


def validate_population(profiles: Sequence[ClientProfile], *, rounds_to_check: int = 1) -> None:
    """Check population-level invariants; raise on the first violation.

    Schedules are probed for ``rounds_to_check`` rounds starting at 0 (random
    per-round schedules are additionally range-checked at construction).
    """
    if not profiles:
        raise ValidationError("population is empty")
    ids = [p.id for p in profiles]
    if len(set(ids)) != len(ids):
        raise DuplicateId(f"duplicate client ids in {ids}")
    if sorted(ids) != list(range(len(ids))):
        raise ValidationError(f"client ids must be 0..{len(ids) - 1} without gaps, got {sorted(ids)}")
    weights = [p.weight for p in profiles]
    if any(not (0.0 < w <= 1.0) for w in weights):
        raise WeightSumError(f"weights must lie in (0, 1]: {weights}")
    total = math.fsum(weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightSumError(f"weights sum to {total!r}, expected 1")
    for p in profiles:
        for r in range(rounds_to_check):
            q = p.link_schedule(r)
            _, steps = p.solver_schedule(r)
            if not 0.0 <= q < 1.0:
                raise BadSchedule(f"client {p.id} round {r}: failure probability {q} outside [0, 1)")
            if steps < 1:
                raise BadSchedule(f"client {p.id} round {r}: local steps {steps} < 1")


@dataclass(frozen=True)
class Population:
    """A validated, id-ordered set of client profiles."""

    profiles: tuple[ClientProfile, ...]

    def __post_init__(self) -> None:
        profs = tuple(sorted(self.profiles, key=lambda p: p.id))
        validate_population(profs)
        object.__setattr__(self, "profiles", profs)
        w = np.array([p.weight for p in profs], dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "_weights", w)

    @classmethod
    def build(
        cls,
        schedule: Schedule,
        weights: ArrayLike | None = None,
        solver: SolverSpec | Sequence[SolverSpec] = SolverSpec(),
    ) -> Population:
        """Population of ``schedule.clients`` clients sharing one schedule.

        Weights default to uniform.
        """
        m = schedule.clients
        w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (m,):
            raise ValidationError(f"expected {m} weights, got shape {w.shape}")
        solvers = [solver] * m if isinstance(solver, SolverSpec) else list(solver)
        if len(solvers) != m:
            raise ValidationError(f"expected {m} solver specs, got {len(solvers)}")
        return cls(tuple(ClientProfile(i, float(w[i]), schedule, solvers[i]) for i in range(m)))

    @property
    def size(self) -> int:
        return len(self.profiles)

    @property
    def weights(self) -> NDArray[np.float64]:
        return self._weights  # type: ignore[attr-defined]

    def round_values(self, round_: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        """Per-client ``(steps, failure)`` arrays for ``round_``."""
        scheds = {id(p.schedule): p.schedule for p in self.profiles}
        if len(scheds) == 1:
            steps, fail = next(iter(scheds.values())).values(round_)
            return steps[: self.size], fail[: self.size]
        steps = np.empty(self.size, dtype=np.int64)
        fail = np.empty(self.size, dtype=np.float64)
        for p in self.profiles:
            s, f = p.schedule.values(round_)
            steps[p.id], fail[p.id] = s[p.id], f[p.id]
        return steps, fail

    @property
    def max_steps(self) -> int:
        return max(p.schedule.max_steps for p in self.profiles)

    @property
    def is_static(self) -> bool:
        return all(p.schedule.is_static for p in self.profiles)
