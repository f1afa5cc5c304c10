"""Synchronous round loop, vectorized over independent replicates.

A :class:`Simulator` advances a batch of replicates in lockstep.  Replicate
``i`` owns a generator seeded with its own seed and consumes it in a fixed
layout, so its trajectory is bit-identical whether it runs alone or inside a
larger batch.  Per chunk of ``chunk`` rounds a replicate draws, in order:

* ``(chunk, K)`` uniforms for client sampling,
* ``(chunk, K)`` uniforms for the uplinks,
* ``(chunk, M, max_steps, d)`` standard normals for gradient noise (only when
  the noise variance is positive).

Every client runs its local solver each round from the same global model and
its delta is counted once per delivered copy, so duplicate samples share one
noise realization.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .aggregation import counts
from .analysis import algorithm_stats, effective_step_factor, surrogate_stats
from .channel import delivery_mask
from .errors import NumericalBlowup, ValidationError
from .sampling import inverse_cdf, probs_fedacs, probs_optimal_sampling
from .solvers import DEFAULT_GUARD, accumulation_vector, local_steps, solver_params
from .problems import QuadraticProblem
from .types import Algorithm, ModelVector, Population, RoundRecord, SolverKind, SolverSpec

log = logging.getLogger(__name__)

METRICS = ("dist_true", "dist_surrogate", "grad_norm_sq", "chi_square", "eta_eff", "t_eff")
EXTRA_METRICS = ("surrogate_grad_sq",)

_NOISE_BLOCK = 1 << 18
_MAX_CHUNK = 512


class StepRule(str, Enum):
    FIXED = "fixed"
    CALIBRATED = "calibrated"
    MATCHED = "matched"


@dataclass(frozen=True, eq=False)
class AlgorithmSpec:
    """One server algorithm with its learning-rate rule.

    ``FIXED`` uses ``eta`` every round.  ``CALIBRATED`` rescales it each round
    so the effective step equals FedAvg's at ``eta`` on the same population.
    ``MATCHED`` equals the effective step of ``match_algorithm`` at ``eta`` on
    ``match_population`` instead.
    """

    algorithm: Algorithm
    eta: float
    step_rule: StepRule = StepRule.FIXED
    match_population: Population | None = None
    match_algorithm: Algorithm = Algorithm.FEDAVG
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))
        object.__setattr__(self, "match_algorithm", Algorithm(self.match_algorithm))
        if not self.eta > 0:
            raise ValidationError(f"learning rate must be positive, got {self.eta}")
        if self.step_rule is StepRule.MATCHED and self.match_population is None:
            raise ValidationError("a matched step rule needs a reference population")
        if not self.label:
            object.__setattr__(self, "label", self.algorithm.value)

    @property
    def sampler(self) -> str:
        return {
            Algorithm.FEDACS: "fedacs",
            Algorithm.OPTIMAL_SAMPLING: "optimal",
        }.get(self.algorithm, "importance")

    @property
    def aggregator(self) -> str:
        return {
            Algorithm.CA_FEDAVG: "ca_fedavg",
            Algorithm.FEDVARP: "fedvarp",
            Algorithm.FEDNOVA: "fednova",
        }.get(self.algorithm, "anonymous")


class _Streams:
    """Per-replicate random streams, drawn in chunks (layout in module docstring)."""

    def __init__(self, seeds: Sequence[int], k: int, clients: int, max_steps: int, dim: int, noisy: bool):
        self.gens = [np.random.default_rng(s) for s in seeds]
        self.k, self.clients, self.max_steps, self.dim, self.noisy = k, clients, max_steps, dim, noisy
        per_round = clients * max_steps * dim if noisy else 1
        self.chunk = max(1, min(_MAX_CHUNK, _NOISE_BLOCK // per_round))
        self.pos = self.chunk

    def _refill(self) -> None:
        c, k = self.chunk, self.k
        us, uc, nz = [], [], []
        for g in self.gens:
            us.append(g.random((c, k)))
            uc.append(g.random((c, k)))
            if self.noisy:
                nz.append(g.standard_normal((c, self.clients, self.max_steps, self.dim)))
        self.u_sample = np.stack(us)
        self.u_link = np.stack(uc)
        self.noise = np.stack(nz) if self.noisy else None
        self.pos = 0

    def next(self) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64] | None]:
        if self.pos == self.chunk:
            self._refill()
        i = self.pos
        self.pos += 1
        noise = None if self.noise is None else self.noise[:, i]
        return self.u_sample[:, i], self.u_link[:, i], noise


@dataclass
class BatchState:
    round: int
    x: NDArray[np.float64]
    memory: NDArray[np.float64]
    memory_round: NDArray[np.int64]


@dataclass
class RoundOutcome:
    """Everything one round produced for the whole batch."""

    round: int
    selected: NDArray[np.int64]
    delivered: NDArray[np.bool_]
    update: NDArray[np.float64]
    metrics: dict[str, NDArray[np.float64]]

    def records(self) -> list[RoundRecord]:
        out = []
        for i in range(self.selected.shape[0]):
            sel = self.selected[i]
            out.append(
                RoundRecord(
                    round=self.round,
                    selected=tuple(sel.tolist()),
                    delivered=tuple(sel[self.delivered[i]].tolist()),
                    update=self.update[i].copy(),
                    metrics={k: float(v[i]) for k, v in self.metrics.items()},
                )
            )
        return out


@dataclass
class Trace:
    """Logged metrics of one algorithm run over a batch of replicates.

    Metric arrays have shape ``(replicates, len(rounds))``.  ``rounds`` holds
    the logged round indices; metrics of round ``r`` are evaluated after that
    round's update.  ``initial`` holds the metrics at the starting point and
    ``iterates`` the global model at each logged round.
    """

    label: str
    algorithm: Algorithm
    seeds: list[int]
    rounds: NDArray[np.int64]
    metrics: dict[str, NDArray[np.float64]]
    initial: dict[str, NDArray[np.float64]]
    final_x: NDArray[np.float64]
    iterates: NDArray[np.float64] | None = None
    selected: NDArray[np.int64] | None = None
    delivered: NDArray[np.bool_] | None = None
    updates: NDArray[np.float64] | None = None

    def records(self, replicate: int) -> list[RoundRecord]:
        if self.selected is None or self.delivered is None or self.updates is None:
            raise ValidationError("run with keep_records=True to materialize round records")
        out = []
        for j, r in enumerate(self.rounds.tolist()):
            sel = self.selected[replicate, j]
            out.append(
                RoundRecord(
                    round=r,
                    selected=tuple(sel.tolist()),
                    delivered=tuple(sel[self.delivered[replicate, j]].tolist()),
                    update=self.updates[replicate, j].copy(),
                    metrics={k: float(v[replicate, j]) for k, v in self.metrics.items()},
                )
            )
        return out

    @staticmethod
    def concat(parts: Sequence[Trace]) -> Trace:
        first = parts[0]

        def cat(name: str):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)

        return Trace(
            label=first.label,
            algorithm=first.algorithm,
            seeds=[s for p in parts for s in p.seeds],
            rounds=first.rounds,
            metrics={k: np.concatenate([p.metrics[k] for p in parts]) for k in first.metrics},
            initial={k: np.concatenate([p.initial[k] for p in parts]) for k in first.initial},
            final_x=np.concatenate([p.final_x for p in parts]),
            iterates=cat("iterates"),
            selected=cat("selected"),
            delivered=cat("delivered"),
            updates=cat("updates"),
        )


class Simulator:
    """Runs one algorithm on one population for a batch of replicate seeds."""

    def __init__(
        self,
        problem: QuadraticProblem,
        population: Population,
        algo: AlgorithmSpec,
        k: int,
        x0: ModelVector | None = None,
        guard: float = DEFAULT_GUARD,
    ):
        if k < 1:
            raise ValidationError(f"sample size must be >= 1, got {k}")
        if problem.clients != population.size:
            raise ValidationError(f"problem has {problem.clients} clients, population {population.size}")
        self.problem, self.population, self.algo, self.k, self.guard = problem, population, algo, k, guard
        d = problem.dim
        self.x0 = np.zeros(d) if x0 is None else np.array(x0, dtype=np.float64).reshape(d)
        self.weights = population.weights
        self.x_true = problem.optimum(self.weights)
        params = np.array([solver_params(p.solver) for p in population.profiles])
        self._rho, self._mu, self._gamma = params[:, 0], params[:, 1], params[:, 2]
        self._solvers: list[SolverSpec] = [p.solver for p in population.profiles]
        self._l1_cache: dict[tuple[SolverSpec, int, float], float] = {}
        self._round_cache: dict[int, dict] = {}
        self.state: BatchState | None = None
        self._streams: _Streams | None = None

    # -- per-round deterministic quantities -------------------------------

    def _l1(self, steps: NDArray[np.int64], eta: float) -> NDArray[np.float64]:
        out = np.empty(steps.size)
        for m, (spec, t) in enumerate(zip(self._solvers, steps.tolist())):
            key = (spec, t, eta if spec.kind is SolverKind.PROXIMAL else 0.0)
            v = self._l1_cache.get(key)
            if v is None:
                v = self._l1_cache[key] = accumulation_vector(spec, t, eta).l1
            out[m] = v
        return out

    def _eta(self, round_: int, failure: NDArray[np.float64], l1: NDArray[np.float64]) -> float:
        algo = self.algo
        if algo.step_rule is StepRule.FIXED:
            return algo.eta
        if algo.step_rule is StepRule.CALIBRATED:
            if algo.algorithm is Algorithm.OPTIMAL_SAMPLING:
                return algo.eta
            target = algo.eta * effective_step_factor(Algorithm.FEDAVG, self.weights, failure, l1)
        else:
            ref = algo.match_population
            assert ref is not None
            ref_steps, ref_fail = ref.round_values(round_)
            ref_l1 = [accumulation_vector(p.solver, int(ref_steps[p.id]), algo.eta).l1 for p in ref.profiles]
            target = algo.eta * effective_step_factor(algo.match_algorithm, ref.weights, ref_fail, ref_l1)
        return target / effective_step_factor(algo.algorithm, self.weights, failure, l1)

    def round_plan(self, round_: int) -> dict:
        """Learning rate, schedules, norms and (if fixed) sampling for ``round_``."""
        key = 0 if self.population.is_static else round_
        plan = self._round_cache.get(key)
        if plan is not None:
            return plan
        steps, failure = self.population.round_values(round_)
        base_l1 = self._l1(steps, self.algo.eta)
        eta = self._eta(round_, failure, base_l1)
        l1 = self._l1(steps, eta)
        plan = {"steps": steps, "failure": failure, "l1": l1, "eta": eta, "p": None, "stats": None}
        if self.algo.sampler == "importance":
            plan["p"] = self.weights
        elif self.algo.sampler == "fedacs":
            plan["p"] = probs_fedacs(self.weights, failure, l1)
        if plan["p"] is not None:
            plan["stats"] = algorithm_stats(self.algo.algorithm, plan["p"], failure, l1, self.weights)
        if self.algo.algorithm is Algorithm.FEDNOVA:
            plan["tau_eff"] = surrogate_stats(plan["p"], failure, l1, self.weights).t_eff
        if len(self._round_cache) > 8:
            self._round_cache.clear()
        self._round_cache[key] = plan
        return plan

    # -- running ------------------------------------------------------------

    def start(self, seeds: Sequence[int]) -> None:
        seeds = [int(s) for s in seeds]
        if not seeds:
            raise ValidationError("need at least one replicate seed")
        n, m, d = len(seeds), self.population.size, self.problem.dim
        self.seeds = seeds
        self.state = BatchState(
            round=0,
            x=np.tile(self.x0, (n, 1)),
            memory=np.zeros((n, m, d)),
            memory_round=np.full((n, m), -1, dtype=np.int64),
        )
        self._streams = _Streams(seeds, self.k, m, self.population.max_steps, d, self.problem.sigma_sq > 0)

    def _metrics(self, x: NDArray[np.float64], stats, eta: float) -> dict[str, NDArray[np.float64]]:
        centers = self.problem.centers
        omega = np.asarray(stats.omega_eff)
        x_sur = (omega[..., :, None] * centers).sum(axis=-2)
        diff_true = x - self.x_true
        diff_sur = x - x_sur
        n = x.shape[0]
        dist_true = np.sqrt(np.einsum("nd,nd->n", diff_true, diff_true))
        sur_sq = np.einsum("nd,nd->n", diff_sur, diff_sur)
        return {
            "dist_true": dist_true,
            "dist_surrogate": np.sqrt(sur_sq),
            "grad_norm_sq": dist_true**2,
            "chi_square": np.broadcast_to(np.asarray(stats.chi_square, dtype=np.float64), (n,)).copy(),
            "eta_eff": np.broadcast_to(eta * np.asarray(stats.eta_eff, dtype=np.float64), (n,)).copy(),
            "t_eff": np.broadcast_to(np.asarray(stats.t_eff, dtype=np.float64), (n,)).copy(),
            "surrogate_grad_sq": sur_sq,
        }

    def _optimal_p(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        g = self.problem.grad_all(x[:, None, :])
        return probs_optimal_sampling(self.weights, np.sqrt(np.einsum("nmd,nmd->nm", g, g)))

    def initial_metrics(self) -> dict[str, NDArray[np.float64]]:
        assert self.state is not None
        plan = self.round_plan(self.state.round)
        stats = plan["stats"]
        if stats is None:
            p = self._optimal_p(self.state.x)
            stats = algorithm_stats(self.algo.algorithm, p, plan["failure"], plan["l1"], self.weights)
        return self._metrics(self.state.x, stats, plan["eta"])

    def step(self, with_metrics: bool = True) -> RoundOutcome:
        """Advance every replicate by one round.

        Metrics of the new iterate are evaluated only if ``with_metrics``.
        """
        state, streams = self.state, self._streams
        if state is None or streams is None:
            raise ValidationError("call start() before step()")
        r = state.round
        plan = self.round_plan(r)
        steps, failure, l1, eta = plan["steps"], plan["failure"], plan["l1"], plan["eta"]
        x = state.x
        n, m, d = x.shape[0], self.population.size, self.problem.dim

        stats = plan["stats"]
        p = plan["p"]
        if p is None:
            p = self._optimal_p(x)
            stats = algorithm_stats(self.algo.algorithm, p, failure, l1, self.weights)

        u_sample, u_link, noise = streams.next()
        selected = inverse_cdf(p, u_sample)
        delivered = delivery_mask(selected, failure, u_link)
        del_counts = counts(np.where(delivered, selected, m), m)

        eps = None
        if noise is not None:
            eps = np.sqrt(self.problem.sigma_sq / d) * noise[:, :, : int(steps.max())]
        centers = self.problem.centers

        def grad(z: NDArray[np.float64], t: int) -> NDArray[np.float64]:
            return z - centers

        deltas = local_steps(
            np.broadcast_to(x[:, None, :], (n, m, d)),
            grad,
            self._rho,
            self._mu,
            self._gamma,
            steps,
            eta,
            eps,
            self.guard,
        )

        alg = self.algo.algorithm
        if alg is Algorithm.CA_FEDAVG:
            total = ((del_counts / (1.0 - failure))[..., None] * deltas).sum(axis=1)
        elif alg is Algorithm.FEDVARP:
            lost = (counts(selected, m) - del_counts)[..., None]
            total = (del_counts[..., None] * deltas).sum(axis=1) + (lost * state.memory).sum(axis=1)
            got = del_counts > 0
            state.memory = np.where(got[..., None], deltas, state.memory)
            state.memory_round = np.where(got, r, state.memory_round)
        elif alg is Algorithm.FEDNOVA:
            total = plan["tau_eff"] * ((del_counts / l1)[..., None] * deltas).sum(axis=1)
        else:
            total = (del_counts[..., None] * deltas).sum(axis=1)
        update = -(eta / self.k) * total
        x_new = x + update
        peak = float(np.max(np.abs(x_new)))
        if not peak <= self.guard:
            raise NumericalBlowup(f"round {r}: global model entry {peak:.3g} is non-finite or exceeds {self.guard:.3g}")
        state.x = x_new
        state.round = r + 1
        metrics = self._metrics(x_new, stats, eta) if with_metrics else {}
        return RoundOutcome(r, selected, delivered, update, metrics)

    def run(self, rounds: int, seeds: Sequence[int], log_every: int = 1, keep_records: bool = False) -> Trace:
        if rounds < 1:
            raise ValidationError(f"rounds must be >= 1, got {rounds}")
        if log_every < 1:
            raise ValidationError(f"log_every must be >= 1, got {log_every}")
        self.start(seeds)
        logged = np.array(sorted(set(range(log_every - 1, rounds, log_every)) | {rounds - 1}), dtype=np.int64)
        n, nl = len(self.seeds), logged.size
        metrics = {k: np.empty((n, nl)) for k in METRICS + EXTRA_METRICS}
        initial = self.initial_metrics()
        iterates = np.empty((n, nl, self.problem.dim))
        sel = dlv = upd = None
        if keep_records:
            sel = np.empty((n, nl, self.k), dtype=np.int64)
            dlv = np.empty((n, nl, self.k), dtype=bool)
            upd = np.empty((n, nl, self.problem.dim))
        j = 0
        for r in range(rounds):
            log_now = j < nl and logged[j] == r
            out = self.step(with_metrics=log_now)
            if log_now:
                for k_, v in out.metrics.items():
                    metrics[k_][:, j] = v
                iterates[:, j] = self.state.x  # type: ignore[union-attr]
                if keep_records:
                    sel[:, j], dlv[:, j], upd[:, j] = out.selected, out.delivered, out.update  # type: ignore[index]
                j += 1
        assert self.state is not None
        return Trace(
            label=self.algo.label,
            algorithm=self.algo.algorithm,
            seeds=list(self.seeds),
            rounds=logged,
            metrics=metrics,
            initial=initial,
            final_x=self.state.x.copy(),
            iterates=iterates,
            selected=sel,
            delivered=dlv,
            updates=upd,
        )


def run_round(sim: Simulator) -> list[RoundRecord]:
    """Advance ``sim`` one round and return one record per replicate."""
    return sim.step().records()


@dataclass(frozen=True, eq=False)
class RunSpec:
    """An algorithm together with the population it runs on."""

    algo: AlgorithmSpec
    population: Population

    @property
    def label(self) -> str:
        return self.algo.label


@dataclass
class ExperimentResult:
    traces: dict[str, Trace] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces.values())


def _run_group(args) -> list[Trace]:
    problem, runs, k, rounds, seeds, log_every, keep_records, x0 = args
    return [
        Simulator(problem, run.population, run.algo, k, x0).run(rounds, seeds, log_every, keep_records)
        for run in runs
    ]


def run_experiment(
    problem: QuadraticProblem,
    runs: Sequence[RunSpec],
    k: int,
    rounds: int,
    seed: int,
    replicates: int,
    *,
    x0: ModelVector | None = None,
    log_every: int = 1,
    keep_records: bool = False,
    jobs: int = 1,
) -> ExperimentResult:
    """Run every algorithm for ``replicates`` replicates seeded ``seed + i``.

    With ``jobs > 1`` replicates are split into contiguous groups run in
    separate processes; results are identical to a single-process run.
    """
    if replicates < 1:
        raise ValidationError(f"replicates must be >= 1, got {replicates}")
    if not runs:
        raise ValidationError("no algorithms to run")
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate run labels: {labels}")
    seeds = [seed + i for i in range(replicates)]
    jobs = max(1, min(jobs, replicates))
    groups = [list(g) for g in np.array_split(np.array(seeds), jobs)]
    tasks = [(problem, list(runs), k, rounds, g, log_every, keep_records, x0) for g in groups]
    if jobs == 1:
        parts = [_run_group(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_group, tasks))
    result = ExperimentResult()
    for i, label in enumerate(labels):
        result.traces[label] = Trace.concat([part[i] for part in parts])
        log.debug("finished %s: %d replicates x %d rounds", label, replicates, rounds)
    return result
