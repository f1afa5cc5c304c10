"""Quadratic client objectives ``F_m(x) = 0.5 * |x - E_m|^2`` with closed-form optima."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ValidationError, WrongShape
from .types import ModelVector, as_model_vector


@dataclass(frozen=True, eq=False)
class QuadraticProblem:
    centers: NDArray[np.float64]
    sigma_sq: float = 0.0

    def __post_init__(self) -> None:
        e = np.array(self.centers, dtype=np.float64)
        if e.ndim == 1:
            e = e[:, None]
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ValidationError(f"centers must be an (M, d) array, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValidationError("centers must be finite")
        if not self.sigma_sq >= 0:
            raise ValidationError(f"noise variance must be >= 0, got {self.sigma_sq}")
        e.setflags(write=False)
        object.__setattr__(self, "centers", e)

    @property
    def clients(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def local_value(self, m: int, x: ArrayLike) -> float:
        diff = as_model_vector(x) - self.centers[m]
        return 0.5 * float(diff @ diff)

    def grad(self, m: int, x: ArrayLike) -> ModelVector:
        return as_model_vector(x) - self.centers[m]

    def grad_all(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Gradients of every client at ``x`` of shape ``(..., M, d)``."""
        return x - self.centers

    def value(self, weights: ArrayLike, x: ArrayLike) -> float:
        """Weighted objective ``sum_m w_m F_m(x)``."""
        diff = as_model_vector(x)[None, :] - self.centers
        return 0.5 * float(np.asarray(weights) @ np.einsum("md,md->m", diff, diff))

    def optimum(self, weights: ArrayLike) -> ModelVector:
        """Minimizer of the weighted objective: the weighted mean of the centers."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[-1] != self.clients:
            raise ValidationError(f"expected {self.clients} weights, got {w.shape[-1]}")
        if np.max(np.abs(w.sum(axis=-1) - 1.0)) > 1e-10:
            raise ValidationError("weights must sum to 1")
        return w @ self.centers

    def kappa_sq(self, weights: ArrayLike) -> float:
        """Dissimilarity constant for ``weights`` with beta^2 = 1.

        For identical unit Hessians ``sum_m w_m |grad F_m|^2 - |grad F|^2`` does
        not depend on ``x``; it equals the weighted spread of the centers.
        """
        w = np.asarray(weights, dtype=np.float64)
        spread = self.centers - self.optimum(w)
        return float(w @ np.einsum("md,md->m", spread, spread))

    def local_objective(self, m: int) -> ClientObjective:
        return ClientObjective(self, m)


@dataclass(frozen=True)
class ClientObjective:
    problem: QuadraticProblem
    m: int

    def gradient(self, x: ModelVector, step: int) -> ModelVector:
        return x - self.problem.centers[self.m]


def gaussian_problem(clients: int, dim: int, seed: int, sigma_sq: float = 0.0) -> QuadraticProblem:
    """Centers drawn i.i.d. from the standard normal distribution."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCE]))
    return QuadraticProblem(rng.standard_normal((clients, dim)), sigma_sq)


def two_client_problem(e: float) -> QuadraticProblem:
    """Scalar two-client instance with centers ``(-e, +e)``."""
    return QuadraticProblem(np.array([[-e], [e]], dtype=np.float64))


def true_optimum(problem: QuadraticProblem, weights: ArrayLike) -> ModelVector:
    return problem.optimum(weights)


def dissimilarity_constants_2client(omega: ArrayLike, e: float) -> tuple[float, float]:
    """``(beta^2, kappa^2) = (1, 4 * Omega_1 * Omega_2 * e^2)`` for centers ``(-e, e)``."""
    o = np.asarray(omega, dtype=np.float64)
    if o.shape != (2,):
        raise WrongShape(f"two-client constants need exactly two weights, got shape {o.shape}")
    return 1.0, float(4.0 * o[0] * o[1] * e * e)


@dataclass(frozen=True)
class AchievabilityInstance:
    omega: NDArray[np.float64]
    surrogate_optimum: float
    chi_sq: float
    kappa_sq: float
    limit_grad_sq: float


def achievability_instance(steps: tuple[int, int], failure: tuple[float, float], e: float) -> AchievabilityInstance:
    """Closed-form fixed point of FedAvg on the two-client instance with uniform weights.

    Plain SGD, so ``|a_m|_1 = T_m``.  At the surrogate minimizer the squared
    true gradient equals ``chi^2 * kappa^2``.
    """
    (t1, t2), (q1, q2) = steps, failure
    if t1 < 1 or t2 < 1 or not (0 <= q1 < 1 and 0 <= q2 < 1):
        raise ValidationError(f"invalid instance T={steps}, q={failure}")
    s1, s2 = (1.0 - q1) * t1, (1.0 - q2) * t2
    omega = np.array([s1, s2]) / (s1 + s2)
    x_sur = (s2 - s1) * e / (s1 + s2)
    chi_sq = (s2 - s1) ** 2 / (4.0 * s1 * s2)
    kappa_sq = 4.0 * omega[0] * omega[1] * e * e
    return AchievabilityInstance(omega, float(x_sur), float(chi_sq), float(kappa_sq), float(chi_sq * kappa_sq))
