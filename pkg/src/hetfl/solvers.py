"""Local solvers and their gradient-accumulation coefficients.

Every supported optimizer is an instance of one update,

    d_t = g_t + mu * (x_t - x_0)
    v_t = rho * v_{t-1} + d_t
    x_{t+1} = x_t - eta * (1 - gamma)**t * v_t

with at most one of ``rho`` (momentum), ``mu`` (proximal) and ``gamma``
(per-step learning-rate decay) nonzero.  :func:`local_steps` runs it on a
batch of independent clients at once; the engine and :func:`run_local` both
go through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import NonContractive, NumericalBlowup, ValidationError
from .types import AccumulationVector, ModelVector, SolverKind, SolverSpec, as_model_vector

DEFAULT_GUARD = 1e12

BatchGradient = Callable[[NDArray[np.float64], int], NDArray[np.float64]]


class LocalObjective(Protocol):
    def gradient(self, x: ModelVector, step: int) -> ModelVector:
        """Full-batch gradient at ``x`` during local step ``step`` (0-based)."""
        ...


@dataclass(frozen=True)
class NoiseSpec:
    """Additive isotropic Gaussian gradient noise with total variance ``variance``."""

    variance: float = 0.0

    def __post_init__(self) -> None:
        if not self.variance >= 0:
            raise ValidationError(f"noise variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class LinearObjective:
    """Objective with a constant gradient ``g``."""

    g: ModelVector

    def gradient(self, x: ModelVector, step: int) -> ModelVector:
        return self.g


@dataclass(frozen=True)
class GradientStream:
    """Ignores the iterate and emits ``grads[step]``."""

    grads: NDArray[np.float64]

    def gradient(self, x: ModelVector, step: int) -> ModelVector:
        return self.grads[step]


@dataclass(frozen=True)
class LocalRunResult:
    delta: ModelVector
    steps: int
    accum: AccumulationVector


def solver_params(spec: SolverSpec) -> tuple[float, float, float]:
    """``(rho, mu, gamma)`` of the unified update for ``spec``."""
    if spec.kind is SolverKind.MOMENTUM:
        return spec.param, 0.0, 0.0
    if spec.kind is SolverKind.PROXIMAL:
        return 0.0, spec.param, 0.0
    if spec.kind is SolverKind.DECAYED:
        return 0.0, 0.0, spec.param
    return 0.0, 0.0, 0.0


def _check_proximal(spec: SolverSpec, eta: float | None) -> None:
    if spec.kind is SolverKind.PROXIMAL:
        if eta is None or not eta > 0:
            raise ValidationError("proximal SGD needs a positive learning rate")
        if eta * spec.param >= 1.0:
            raise NonContractive(f"eta * mu = {eta * spec.param} >= 1")


def accumulation_vector(spec: SolverSpec, steps: int, eta: float | None = None) -> AccumulationVector:
    """Closed-form accumulation coefficients of ``steps`` local iterations."""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    _check_proximal(spec, eta)
    t = np.arange(1, steps + 1, dtype=np.float64)
    if spec.kind is SolverKind.SGD:
        a = np.ones(steps)
    elif spec.kind is SolverKind.MOMENTUM:
        rho = spec.param
        a = (1.0 - rho ** (steps - t + 1)) / (1.0 - rho)
    elif spec.kind is SolverKind.PROXIMAL:
        a = (1.0 - eta * spec.param) ** (steps - t)  # type: ignore[operator]
    else:
        a = (1.0 - spec.param) ** (t - 1)
    return AccumulationVector(a)


def local_steps(
    x0: NDArray[np.float64],
    grad: BatchGradient,
    rho: ArrayLike,
    mu: ArrayLike,
    gamma: ArrayLike,
    steps: ArrayLike,
    eta: float,
    noise: NDArray[np.float64] | None = None,
    guard: float = DEFAULT_GUARD,
) -> NDArray[np.float64]:
    """Run the unified local update on a batch and return the cumulative gradients.

    ``x0`` has shape ``(..., d)``; ``rho``, ``mu``, ``gamma`` and ``steps``
    broadcast against ``x0.shape[:-1]``.  ``noise``, when given, has shape
    ``(..., max_steps, d)`` and is added to the gradient of each step.  Rows
    stop moving once their own step budget is used up.  The return value is
    ``(x0 - x_final) / eta``.

    Overflow is detected once, on the final iterates: a non-finite value
    anywhere along the way propagates to them.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    steps = np.asarray(steps, dtype=np.int64)
    rho_c = np.asarray(rho, dtype=np.float64)[..., None]
    mu_c = np.asarray(mu, dtype=np.float64)[..., None]
    decay = 1.0 - np.asarray(gamma, dtype=np.float64)
    use_rho, use_mu, use_decay = bool(rho_c.any()), bool(mu_c.any()), bool(np.any(decay != 1.0))
    tmax = int(steps.max()) if steps.size else 0
    ragged = bool(np.any(steps != tmax))

    x = x0.copy()
    v = None
    for t in range(tmax):
        g = grad(x, t)
        if noise is not None:
            g = g + noise[..., t, :]
        if use_mu:
            g = g + mu_c * (x - x0)
        v = rho_c * v + g if use_rho and v is not None else g
        if use_decay or ragged:
            scale = eta * decay**t
            if ragged:
                scale = np.where(t < steps, scale, 0.0)
            x = x - scale[..., None] * v
        else:
            x = x - eta * v
    if x.size:
        peak = float(np.max(np.einsum("...i,...i->...", x, x)))
        if not peak <= guard * guard:
            raise NumericalBlowup(f"local iterate norm {np.sqrt(peak):.3g} is non-finite or exceeds guard {guard:.3g}")
    return (x0 - x) / eta


def run_local(
    start: ArrayLike,
    objective: LocalObjective,
    spec: SolverSpec,
    steps: int,
    eta: float,
    noise: NoiseSpec = NoiseSpec(),
    rng: np.random.Generator | None = None,
    guard: float = DEFAULT_GUARD,
) -> LocalRunResult:
    """Run ``steps`` iterations of ``spec`` on one client starting from ``start``.

    Noise, if any, is drawn as one ``(steps, d)`` standard-normal block from
    ``rng`` and scaled to per-coordinate variance ``variance / d``.
    """
    x0 = as_model_vector(start, what="start")
    if not eta > 0:
        raise ValidationError(f"eta must be positive, got {eta}")
    accum = accumulation_vector(spec, steps, eta)
    d = x0.size
    eps = None
    if noise.variance > 0:
        if rng is None:
            raise ValidationError("a noisy local run needs an rng")
        eps = (np.sqrt(noise.variance / d) * rng.standard_normal((steps, d)))[None]
    rho, mu, gamma = solver_params(spec)

    def grad(x: NDArray[np.float64], t: int) -> NDArray[np.float64]:
        return np.asarray(objective.gradient(x[0], t), dtype=np.float64)[None]

    delta = local_steps(x0[None], grad, rho, mu, gamma, steps, eta, eps, guard)[0]
    return LocalRunResult(delta=delta, steps=steps, accum=accum)


def extract_coefficients(spec: SolverSpec, steps: int, eta: float | None = None) -> AccumulationVector:
    """Read the accumulation coefficients off the optimizer itself.

    Step ``t`` is fed the ``t``-th standard basis vector of R^steps, so the
    ``t``-th coordinate of the cumulative update is the weight the optimizer
    gave to gradient ``t``.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    _check_proximal(spec, eta)
    lr = 1.0 if eta is None else eta
    basis = np.eye(steps)
    rho, mu, gamma = solver_params(spec)
    delta = local_steps(np.zeros((1, steps)), lambda x, t: basis[t][None], rho, mu, gamma, steps, lr)
    return AccumulationVector(delta[0])
