"""Surrogate-objective analysis, convergence bounds, co-design and step calibration.

Effective learning rates are handled as unitless factors throughout: the
factor returned for an algorithm times its learning rate is the effective
learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import Infeasible, ValidationError
from .solvers import accumulation_vector
from .types import Algorithm, ModelVector, Population, SurrogateStats

CONSISTENT_TOL = 1e-10


def chi_square(weights: ArrayLike, omega: ArrayLike) -> NDArray[np.float64] | float:
    """Chi-square divergence of ``weights`` from ``omega`` along the last axis.

    Exactly zero whenever the two agree to within ``CONSISTENT_TOL``.
    """
    w = np.asarray(weights, dtype=np.float64)
    o = np.asarray(omega, dtype=np.float64)
    chi = np.sum((w - o) ** 2 / o, axis=-1)
    chi = np.where(np.max(np.abs(w - o), axis=-1) <= CONSISTENT_TOL, 0.0, chi)
    return float(chi) if chi.ndim == 0 else chi


def surrogate_stats(p: ArrayLike, failure: ArrayLike, l1norms: ArrayLike, weights: ArrayLike) -> SurrogateStats:
    """Aggregation weights, surrogate weights and effective constants of one round.

    ``p`` may carry a leading batch axis; the scalar fields then become arrays
    over that axis.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(failure, dtype=np.float64)
    a = np.asarray(l1norms, dtype=np.float64)
    received = p * (1.0 - q)
    eta_eff = received.sum(axis=-1, keepdims=True)
    gamma = received / eta_eff
    mass = gamma * a
    t_eff = mass.sum(axis=-1, keepdims=True)
    omega = mass / t_eff
    return SurrogateStats(gamma, omega, _squeeze(eta_eff), _squeeze(t_eff), chi_square(weights, omega))


def _squeeze(x: NDArray[np.float64]):
    x = x[..., 0]
    return float(x) if x.ndim == 0 else x


def algorithm_stats(
    algorithm: Algorithm, p: ArrayLike, failure: ArrayLike, l1norms: ArrayLike, weights: ArrayLike
) -> SurrogateStats:
    """Expected-update decomposition for ``algorithm`` under sampling ``p``.

    FedAvg-style algorithms (FedAvg, FedACS, optimal sampling) minimize the
    plain surrogate.  FedNova removes the ``|a_m|_1`` skew so its surrogate
    weights are the aggregation weights.  The inverse-probability aggregators
    (c-a-FedAvg, and FedVarp assuming fresh and stored updates agree in
    expectation) cancel the link bias but keep the computation skew.
    """
    alg = Algorithm(algorithm)
    base = surrogate_stats(p, failure, l1norms, weights)
    if alg is Algorithm.FEDNOVA:
        return SurrogateStats(base.gamma, base.gamma, base.eta_eff, base.t_eff, chi_square(weights, base.gamma))
    if alg in (Algorithm.CA_FEDAVG, Algorithm.FEDVARP):
        p = np.asarray(p, dtype=np.float64)
        pa = p * np.asarray(l1norms, dtype=np.float64)
        total = pa.sum(axis=-1, keepdims=True)
        omega = pa / total
        return SurrogateStats(p, omega, _squeeze(total), _squeeze(np.ones_like(total)), chi_square(weights, omega))
    return base


def surrogate_optimum_quadratic(centers: ArrayLike, omega: ArrayLike) -> ModelVector:
    """Minimizer of ``sum_m omega_m * 0.5 * |x - E_m|^2``, i.e. ``sum_m omega_m E_m``."""
    e = np.asarray(centers, dtype=np.float64)
    o = np.asarray(omega, dtype=np.float64)
    if abs(o.sum(axis=-1) - 1.0).max() > CONSISTENT_TOL:
        raise ValidationError(f"weights sum to {o.sum(axis=-1)}, expected 1")
    return o @ e


def small_eta_ok(eta: float, smoothness: float, max_l1: float) -> bool:
    """Step-size condition under which the surrogate bound is valid."""
    z = eta * smoothness * max_l1
    denom = 1.0 - 2.0 * z * z
    if denom <= 0:
        return False
    c = z * z / denom
    return c + 2.0 * z * c + z <= 0.25


def descent_rho(eta: float, smoothness: float, max_l1: float) -> float:
    z = eta * smoothness * max_l1
    return (2.0 * z + 1.0) * (z * z / (1.0 - 2.0 * z * z) + 0.5)


def theorem1_bound(
    gap: float,
    eta: float,
    eta_eff: float,
    t_eff: float,
    rounds: int,
    kappa_sq: float,
    beta_sq: float,
    smoothness: float,
    max_l1: float,
    sigma_sq: float,
) -> float:
    """Bound on the average squared surrogate-gradient norm after ``rounds`` rounds.

    ``gap`` is the initial surrogate suboptimality and ``eta_eff`` the
    effective learning rate (learning rate times the factor).
    """
    if beta_sq < 1:
        raise ValidationError(f"beta^2 must be >= 1, got {beta_sq}")
    step = eta_eff * t_eff
    return (
        4.0 * gap / (step * rounds)
        + step * kappa_sq / beta_sq
        + 2.0 * eta * smoothness * max_l1**2 * sigma_sq / t_eff
    )


def theorem2_limit(chi_sq: float, kappa_sq: float, sigma_sq: float = 0.0) -> tuple[float, float]:
    """Limiting true-gradient error floors without and with gradient noise."""
    if min(chi_sq, kappa_sq, sigma_sq) < 0:
        raise ValidationError("chi^2, kappa^2 and sigma^2 must be non-negative")
    floor = chi_sq * kappa_sq
    return floor, floor + sigma_sq


def distance_bounds(grad_norm_at_surrogate: float, chi_sq: float, kappa_sq: float, smoothness: float = 1.0) -> tuple[float, float]:
    """``(lower bound on |x~* - x*|, ceiling on |grad F(x~*)|)``."""
    return grad_norm_at_surrogate / smoothness, float(np.sqrt(chi_sq * kappa_sq))


@dataclass(frozen=True)
class CodesignResult:
    failure: NDArray[np.float64]
    l1norms: NDArray[np.float64]
    eta_eff: float
    t_eff: float


def codesign_solve(
    weights: ArrayLike,
    anchor: tuple[float, float],
    *,
    failure: ArrayLike | None = None,
    l1norms: ArrayLike | None = None,
) -> CodesignResult:
    """Complete a link/compute profile so that ``(1 - q_m) |a_m|_1`` is constant.

    ``anchor`` is ``(q_1, |a_1|_1)``.  Pass exactly one of the full ``failure``
    or ``l1norms`` vectors; its first entry must match the anchor.
    """
    w = np.asarray(weights, dtype=np.float64)
    q1, a1 = float(anchor[0]), float(anchor[1])
    if not 0 <= q1 < 1 or not a1 > 0:
        raise Infeasible(f"anchor (q1={q1}, |a1|={a1}) is not valid")
    if (failure is None) == (l1norms is None):
        raise ValidationError("give exactly one of failure or l1norms")
    level = (1.0 - q1) * a1
    if failure is not None:
        q = np.array(failure, dtype=np.float64)
        if q.shape != w.shape or abs(q[0] - q1) > 1e-12:
            raise ValidationError("failure vector must match weights and start with the anchor q1")
        if np.any(q < 0) or np.any(q >= 1):
            raise Infeasible(f"failure probabilities outside [0, 1): {q}")
        a = level / (1.0 - q)
        a[0] = a1
    else:
        a = np.array(l1norms, dtype=np.float64)
        if a.shape != w.shape or abs(a[0] - a1) > 1e-12 * a1:
            raise ValidationError("l1norms vector must match weights and start with the anchor |a1|")
        if np.any(a <= 0):
            raise Infeasible(f"accumulation norms must be positive: {a}")
        q = 1.0 - level / a
        q[0] = q1
        bad = q < -1e-12
        if np.any(bad):
            raise Infeasible(f"clients {np.flatnonzero(bad).tolist()} would need negative failure probability")
        q = np.maximum(q, 0.0)
    eta_eff = float(np.sum(w * (1.0 - q)))
    return CodesignResult(q, a, eta_eff, level / eta_eff)


def build_w_and_check_rank(weights: ArrayLike, l1norms: ArrayLike) -> tuple[NDArray[np.float64], float]:
    """Consistency matrix and the residual of its weighted row combination.

    Row ``m`` of ``W`` encodes ``(1-q_m)|a_m| = sum_j w_j (1-q_j)|a_j|`` as
    ``W @ (1 - q) = 0``.  The rows satisfy ``sum_m w_m W[m] = 0``; the
    returned residual is the max-norm of that combination.
    """
    w = np.asarray(weights, dtype=np.float64)
    a = np.asarray(l1norms, dtype=np.float64)
    mat = np.tile(w * a, (w.size, 1)) - np.diag(a)
    residual = float(np.max(np.abs(w @ mat)))
    return mat, residual


def effective_step_factor(
    algorithm: Algorithm, weights: ArrayLike, failure: ArrayLike, l1norms: ArrayLike
) -> float:
    """``eta_eff * T_eff`` per unit learning rate, with importance sampling as the reference.

    Optimal sampling reports FedAvg's value, matching its inherited step.
    """
    w = np.asarray(weights, dtype=np.float64)
    q = np.asarray(failure, dtype=np.float64)
    a = np.asarray(l1norms, dtype=np.float64)
    alg = Algorithm(algorithm)
    if alg in (Algorithm.FEDAVG, Algorithm.FEDNOVA, Algorithm.OPTIMAL_SAMPLING):
        return float(np.sum(w * (1.0 - q) * a))
    if alg is Algorithm.FEDACS:
        return float(1.0 / np.sum(w / ((1.0 - q) * a)))
    return float(np.sum(w * a))


def calibrate_from_arrays(
    base_eta: float, weights: ArrayLike, failure: ArrayLike, l1norms: ArrayLike
) -> dict[Algorithm, float]:
    """Learning rate per algorithm giving every one FedAvg's effective step."""
    if not base_eta > 0:
        raise ValidationError(f"base learning rate must be positive, got {base_eta}")
    target = base_eta * effective_step_factor(Algorithm.FEDAVG, weights, failure, l1norms)
    out = {}
    for alg in Algorithm:
        if alg is Algorithm.OPTIMAL_SAMPLING:
            out[alg] = base_eta
        else:
            out[alg] = target / effective_step_factor(alg, weights, failure, l1norms)
    return out


def calibrate_step_lengths(base_eta: float, population: Population, round_: int = 0) -> dict[Algorithm, float]:
    """Calibrated learning rates for ``population`` at ``round_``.

    Accumulation norms are taken at ``base_eta`` (only proximal SGD depends
    on the learning rate).
    """
    steps, failure = population.round_values(round_)
    l1 = [accumulation_vector(p.solver, int(steps[p.id]), base_eta).l1 for p in population.profiles]
    return calibrate_from_arrays(base_eta, population.weights, failure, l1)
