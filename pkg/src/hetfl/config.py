"""Experiment configuration files and shipped presets.

Configs are INI files read with :mod:`configparser`.  The keys are documented
in the README; in short:

``[experiment]``
    ``rounds``, ``sample_size``, ``learning_rate`` (required), ``replicates``,
    ``seed``, ``log_every``, ``x0``, ``out``.
``[problem]``
    either ``centers`` (rows separated by ``;``) or ``kind = gaussian`` with
    ``clients``, ``dim``, ``seed``; optional ``weights`` and ``noise_variance``.
``[solver]``
    default local solver: ``kind`` and ``param``.
``[schedule]`` and ``[schedule.NAME]``
    ``kind`` is ``static``, ``uniform``, ``two_group`` or ``codesign``.
``[algorithm.LABEL]``
    ``method``, ``solver``, ``solver_param``, ``learning_rate``,
    ``step_rule``, ``match_step_to``, ``schedule``.

List values are comma separated; ``v*n`` repeats ``v`` ``n`` times and
``linspace(a, b, n)`` expands to ``n`` evenly spaced values.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from .analysis import codesign_solve
from .channel import Schedule, schedule_static, schedule_two_group, schedule_uniform_random
from .engine import AlgorithmSpec, RunSpec, StepRule
from .errors import ParseError, UnknownPreset, ValidationError
from .problems import QuadraticProblem, gaussian_problem
from .solvers import accumulation_vector
from .types import Algorithm, Population, SolverKind, SolverSpec

PRESETS = ("example2-static", "fig2-left", "fig2-middle", "fig2-right", "fig4-codesign", "achievability")
DEFAULT_SCHEDULE = "default"

_KEYS: dict[str, set[str]] = {
    "experiment": {"rounds", "sample_size", "learning_rate", "replicates", "seed", "log_every", "x0", "out"},
    "problem": {"kind", "centers", "clients", "dim", "seed", "weights", "noise_variance"},
    "solver": {"kind", "param"},
    "schedule": {
        "kind", "steps", "failure", "steps_range", "failure_range", "per_round", "seed", "split",
        "first_steps", "first_failure", "second_steps", "second_failure", "anchor_failure",
    },
    "algorithm": {"method", "solver", "solver_param", "learning_rate", "step_rule", "match_step_to", "schedule"},
}

_METHODS = {
    "fedavg": Algorithm.FEDAVG,
    "fedacs": Algorithm.FEDACS,
    "cafedavg": Algorithm.CA_FEDAVG,
    "fedvarp": Algorithm.FEDVARP,
    "fednova": Algorithm.FEDNOVA,
    "optimalsampling": Algorithm.OPTIMAL_SAMPLING,
    "os": Algorithm.OPTIMAL_SAMPLING,
}

_LINSPACE = re.compile(r"^linspace\(\s*([^,]+),([^,]+),([^,)]+)\)$")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    problem: QuadraticProblem
    runs: tuple[RunSpec, ...]
    sample_size: int
    rounds: int
    learning_rate: float
    replicates: int = 1
    seed: int = 0
    log_every: int = 1
    x0: NDArray[np.float64] | None = None
    out: str | None = None
    weights: NDArray[np.float64] = field(default_factory=lambda: np.ones(1))
    solver: SolverSpec = SolverSpec()
    schedules: Mapping[str, Schedule] = field(default_factory=dict)

    @property
    def population(self) -> Population:
        """The default schedule with the default solver and weights."""
        return Population.build(self.schedules[DEFAULT_SCHEDULE], self.weights, self.solver)

    def with_overrides(self, **changes: Any) -> ExperimentConfig:
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig(**fields)


class _Section:
    """Typed, key-checked access to one config section."""

    def __init__(self, name: str, kind: str, items: Mapping[str, str]):
        self.name = name
        unknown = sorted(set(items) - _KEYS[kind])
        if unknown:
            raise ValidationError(f"[{name}] unknown key {unknown[0]!r}")
        self.items = dict(items)

    def has(self, key: str) -> bool:
        return key in self.items

    def _get(self, key: str, conv: Callable[[str], Any], default: Any) -> Any:
        if key not in self.items:
            if default is _REQUIRED:
                raise ValidationError(f"[{self.name}] missing required key {key!r}")
            return default
        raw = self.items[key].strip()
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"[{self.name}] bad value for {key!r}: {raw!r} ({exc})") from None

    def str(self, key: str, default: Any = None) -> Any:
        return self._get(key, str, default if default is not None else _REQUIRED)

    def opt_str(self, key: str) -> str | None:
        return self._get(key, str, None)

    def int(self, key: str, default: Any = None) -> Any:
        return self._get(key, int, default if default is not None else _REQUIRED)

    def float(self, key: str, default: Any = None) -> Any:
        return self._get(key, float, default if default is not None else _REQUIRED)

    def bool(self, key: str, default: bool) -> bool:
        return self._get(key, _to_bool, default)

    def floats(self, key: str, default: Any = None) -> Any:
        return self._get(key, _parse_list, default if default is not None else _REQUIRED)

    def pair(self, key: str) -> tuple[float, float]:
        v = self.floats(key)
        if v.size != 2:
            raise ValidationError(f"[{self.name}] {key!r} needs exactly two values, got {v.size}")
        return float(v[0]), float(v[1])


_REQUIRED = object()


def _to_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _parse_list(raw: str) -> NDArray[np.float64]:
    m = _LINSPACE.match(raw)
    if m:
        n = int(m.group(3))
        return np.linspace(float(m.group(1)), float(m.group(2)), n)
    out: list[float] = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            raise ValueError("empty list item")
        if "*" in item:
            value, times = item.split("*", 1)
            out.extend([float(value)] * int(times))
        else:
            out.append(float(item))
    return np.array(out, dtype=np.float64)


def _parse_matrix(raw: str) -> NDArray[np.float64]:
    rows = [_parse_list(r) for r in raw.split(";") if r.strip()]
    if not rows or len({r.size for r in rows}) != 1:
        raise ValueError("rows must be non-empty and of equal length")
    return np.vstack(rows)


def _steps(values: NDArray[np.float64], name: str) -> NDArray[np.int64]:
    if np.any(values != np.round(values)):
        raise ValidationError(f"[{name}] step counts must be integers")
    return values.astype(np.int64)


def _solver(kind: str, param: float, where: str) -> SolverSpec:
    try:
        k = SolverKind(kind.lower())
    except ValueError:
        raise ValidationError(f"[{where}] unknown solver {kind!r}") from None
    return SolverSpec(k, param if k is not SolverKind.SGD else 0.0)


def _problem(sec: _Section) -> QuadraticProblem:
    sigma_sq = sec.float("noise_variance", 0.0)
    kind = sec.opt_str("kind") or ("explicit" if sec.has("centers") else "gaussian")
    if kind == "explicit":
        return QuadraticProblem(sec._get("centers", _parse_matrix, _REQUIRED), sigma_sq)
    if kind == "gaussian":
        return gaussian_problem(sec.int("clients"), sec.int("dim"), sec.int("seed", 0), sigma_sq)
    raise ValidationError(f"[{sec.name}] unknown problem kind {kind!r}")


def _schedule(sec: _Section, clients: int, solver: SolverSpec, eta: float, weights: NDArray[np.float64]) -> Schedule:
    kind = sec.str("kind")
    seed = sec.int("seed", 0)
    if kind == "static":
        steps = _steps(sec.floats("steps"), sec.name)
        return schedule_static(steps, sec.floats("failure"), clients)
    if kind == "uniform":
        lo, hi = sec.pair("steps_range")
        return schedule_uniform_random(clients, (int(lo), int(hi)), sec.pair("failure_range"), sec.bool("per_round", False), seed)
    if kind == "two_group":
        first = (sec.pair("first_steps"), sec.pair("first_failure"))
        second = (sec.pair("second_steps"), sec.pair("second_failure"))
        return schedule_two_group(clients, sec.int("split"), first, second, seed, sec.bool("per_round", True))  # type: ignore[arg-type]
    if kind == "codesign":
        steps = _steps(sec.floats("steps"), sec.name)
        if steps.size == 1:
            steps = np.full(clients, steps[0])
        l1 = np.array([accumulation_vector(solver, int(t), eta).l1 for t in steps])
        result = codesign_solve(weights, (sec.float("anchor_failure"), float(l1[0])), l1norms=l1)
        return schedule_static(steps, result.failure, clients)
    raise ValidationError(f"[{sec.name}] unknown schedule kind {kind!r}")


def _read(sources: list[tuple[str, str]]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # type: ignore[assignment,method-assign]
    for name, text in sources:
        try:
            cp.read_string(text, source=name)
        except configparser.Error as exc:
            raise ParseError(str(exc)) from None
    return cp


def build_config(cp: configparser.ConfigParser) -> ExperimentConfig:
    sections: dict[str, tuple[str, dict[str, str]]] = {}
    for name in cp.sections():
        head = name.split(".", 1)[0]
        if head not in _KEYS or (head in ("experiment", "problem", "solver") and name != head):
            raise ValidationError(f"unknown section [{name}]")
        if head == "algorithm" and "." not in name:
            raise ValidationError("algorithm sections need a label, e.g. [algorithm.FedAvg]")
        sections[name] = (head, dict(cp.items(name)))
        _Section(name, head, sections[name][1])  # reject unknown keys up front

    def section(name: str) -> _Section:
        head, items = sections.get(name, (name.split(".", 1)[0], {}))
        return _Section(name, head, items)

    if "experiment" not in sections:
        raise ValidationError("missing [experiment] section")
    if "problem" not in sections:
        raise ValidationError("missing [problem] section")
    exp = section("experiment")
    problem = _problem(section("problem"))
    m = problem.clients
    psec = section("problem")
    weights = psec.floats("weights", np.full(m, 1.0 / m))
    if weights.shape != (m,):
        raise ValidationError(f"[problem] expected {m} weights, got {weights.size}")
    ssec = section("solver")
    solver = _solver(ssec.str("kind", "sgd"), ssec.float("param", 0.0), "solver")
    eta = exp.float("learning_rate")

    schedules: dict[str, Schedule] = {}
    for name, (head, _) in sections.items():
        if head == "schedule":
            label = DEFAULT_SCHEDULE if name == "schedule" else name.split(".", 1)[1]
            schedules[label] = _schedule(section(name), m, solver, eta, weights)
    if DEFAULT_SCHEDULE not in schedules:
        raise ValidationError("missing [schedule] section")
    for label, sched in schedules.items():
        if sched.clients != m:
            raise ValidationError(f"schedule {label!r} has {sched.clients} clients, problem has {m}")

    algo_secs = [(n.split(".", 1)[1], section(n)) for n, (h, _) in sections.items() if h == "algorithm"]
    if not algo_secs:
        algo_secs = [("FedAvg", _Section("algorithm.FedAvg", "algorithm", {"method": "FedAvg"}))]
    resolved: dict[str, tuple[Algorithm, float, Population]] = {}
    pending: list[tuple[str, _Section, Algorithm, float, Population, StepRule]] = []
    for label, sec in algo_secs:
        method = sec.str("method", label)
        alg = _METHODS.get(method.lower().replace("-", "").replace("_", ""))
        if alg is None:
            raise ValidationError(f"[{sec.name}] unknown method {method!r}")
        run_solver = solver
        if sec.has("solver"):
            run_solver = _solver(sec.str("solver"), sec.float("solver_param", 0.0), sec.name)
        sched_name = sec.str("schedule", DEFAULT_SCHEDULE)
        if sched_name not in schedules:
            raise ValidationError(f"[{sec.name}] unknown schedule {sched_name!r}")
        pop = Population.build(schedules[sched_name], weights, run_solver)
        try:
            rule = StepRule(sec.str("step_rule", "fixed").lower())
        except ValueError:
            raise ValidationError(f"[{sec.name}] unknown step_rule {sec.str('step_rule')!r}") from None
        run_eta = sec.float("learning_rate", eta)
        resolved[label] = (alg, run_eta, pop)
        pending.append((label, sec, alg, run_eta, pop, rule))

    runs = []
    for label, sec, alg, run_eta, pop, rule in pending:
        if rule is StepRule.MATCHED:
            ref = sec.str("match_step_to")
            if ref not in resolved:
                raise ValidationError(f"[{sec.name}] match_step_to names unknown algorithm {ref!r}")
            ref_alg, ref_eta, ref_pop = resolved[ref]
            spec = AlgorithmSpec(alg, ref_eta, rule, ref_pop, ref_alg, label)
        else:
            if sec.has("match_step_to"):
                raise ValidationError(f"[{sec.name}] match_step_to needs step_rule = matched")
            spec = AlgorithmSpec(alg, run_eta, rule, label=label)
        runs.append(RunSpec(spec, pop))

    x0 = None
    if exp.has("x0"):
        x0 = exp.floats("x0")
        if x0.size == 1:
            x0 = np.full(problem.dim, x0[0])
        if x0.shape != (problem.dim,):
            raise ValidationError(f"[experiment] x0 needs {problem.dim} values, got {x0.size}")
    cfg = ExperimentConfig(
        problem=problem,
        runs=tuple(runs),
        sample_size=exp.int("sample_size"),
        rounds=exp.int("rounds"),
        learning_rate=eta,
        replicates=exp.int("replicates", 1),
        seed=exp.int("seed", 0),
        log_every=exp.int("log_every", 1),
        x0=x0,
        out=exp.opt_str("out"),
        weights=weights,
        solver=solver,
        schedules=schedules,
    )
    for key in ("sample_size", "rounds", "replicates", "log_every"):
        if getattr(cfg, key) < 1:
            raise ValidationError(f"[experiment] {key} must be >= 1, got {getattr(cfg, key)}")
    return cfg


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise UnknownPreset(name)
    return resources.files("hetfl.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def load(*, path: str | Path | None = None, preset_name: str | None = None) -> ExperimentConfig:
    """Config from a preset, a file, or a file layered over a preset."""
    sources = []
    if preset_name is not None:
        sources.append((f"<preset {preset_name}>", preset_text(preset_name)))
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc.strerror}") from None
        sources.append((str(path), text))
    if not sources:
        raise ValidationError("need a config path or a preset name")
    return build_config(_read(sources))


def parse_config(path: str | Path) -> ExperimentConfig:
    return load(path=path)


def preset(name: str) -> ExperimentConfig:
    return load(preset_name=name)
