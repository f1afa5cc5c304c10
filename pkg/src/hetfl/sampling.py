"""Client sampling probabilities and with-replacement draws.

Probability vectors are plain float arrays over the client axis.  The
probability functions also accept a leading batch axis (one row per
replicate), which the engine uses for gradient-norm based sampling.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import AllZeroGradients, DegenerateLink, ValidationError

PROB_SUM_TOL = 1e-10
DEFAULT_FLOOR = 1e-6
LINK_EPS = 1e-9


def check_probabilities(p: ArrayLike) -> NDArray[np.float64]:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 1:
        raise ValidationError("probability vector is empty")
    if not np.all(np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1):
        raise ValidationError(f"probabilities must lie in (0, 1]: {p}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_SUM_TOL):
        raise ValidationError(f"probabilities sum to {p.sum(axis=-1)}, expected 1")
    return p


def probs_importance(weights: ArrayLike) -> NDArray[np.float64]:
    return check_probabilities(np.array(weights, dtype=np.float64))


def probs_uniform(clients: int) -> NDArray[np.float64]:
    if clients < 1:
        raise ValidationError(f"need at least one client, got {clients}")
    return np.full(clients, 1.0 / clients)


def probs_optimal_sampling(
    weights: ArrayLike, grad_norms: ArrayLike, floor: float = DEFAULT_FLOOR
) -> NDArray[np.float64]:
    """Sample proportionally to importance times gradient norm.

    Norms are floored at ``floor`` before weighting so that no client ends up
    with zero probability.
    """
    w = np.asarray(weights, dtype=np.float64)
    norms = np.asarray(grad_norms, dtype=np.float64)
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise ValidationError(f"gradient norms must be finite and >= 0: {norms}")
    if np.any(np.all(norms == 0, axis=-1)):
        raise AllZeroGradients("every client has a zero gradient norm")
    raw = w * np.maximum(norms, floor)
    return raw / raw.sum(axis=-1, keepdims=True)


def probs_fedacs(weights: ArrayLike, failure: ArrayLike, l1norms: ArrayLike) -> NDArray[np.float64]:
    """Heterogeneity-aware probabilities ``p_m ∝ w_m / ((1 - q_m) |a_m|_1)``.

    Under these probabilities ``p_m (1 - q_m) |a_m|_1 / w_m`` is the same for
    every client, which makes the surrogate weights equal the true weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    q = np.asarray(failure, dtype=np.float64)
    a = np.asarray(l1norms, dtype=np.float64)
    if np.any(q >= 1.0 - LINK_EPS):
        raise DegenerateLink(f"failure probability too close to 1: {q}")
    if np.any(q < 0):
        raise ValidationError(f"failure probabilities must be >= 0: {q}")
    if np.any(a <= 0):
        raise ValidationError(f"accumulation norms must be positive: {a}")
    raw = w / ((1.0 - q) * a)
    return raw / raw.sum(axis=-1, keepdims=True)


def inverse_cdf(p: NDArray[np.float64], u: NDArray[np.float64]) -> NDArray[np.int64]:
    """Map uniforms ``u`` to client ids under ``p`` by inverse CDF.

    ``p`` is ``(M,)`` or ``(B, M)``; ``u`` is ``(..., K)`` with matching batch
    shape.
    """
    cdf = np.cumsum(p, axis=-1)
    m = p.shape[-1]
    if p.ndim == 1:
        idx = np.searchsorted(cdf, u, side="right")
    else:
        idx = (u[..., :, None] >= cdf[..., None, :]).sum(axis=-1)
    return np.minimum(idx, m - 1).astype(np.int64)


def draw_multiset(p: ArrayLike, k: int, rng: np.random.Generator) -> list[int]:
    """``k`` independent categorical draws, one uniform each, in draw order."""
    if k < 1:
        raise ValidationError(f"sample size must be >= 1, got {k}")
    p = check_probabilities(p)
    return inverse_cdf(p, rng.random(k)).tolist()
