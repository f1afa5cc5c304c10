"""Server update rules.

``delivered`` and ``selected`` are multisets given as sequences of client
ids; a client that appears twice contributes twice.  ``deltas`` maps a client
id to its cumulative local gradient.  Sums run over the multiset in sorted id
order so the floating-point result does not depend on arrival order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateLink, ValidationError
from .sampling import LINK_EPS
from .types import ModelVector, as_model_vector


def _weighted_sum(x: ModelVector, ids: Sequence[int], deltas: Mapping[int, ArrayLike], scale: Mapping[int, float] | None = None) -> ModelVector:
    acc = np.zeros_like(x)
    for m in sorted(ids):
        d = np.asarray(deltas[m], dtype=np.float64)
        acc = acc + (d if scale is None else scale[m] * d)
    return acc


def aggregate_anonymous(
    x: ArrayLike, delivered: Sequence[int], deltas: Mapping[int, ArrayLike], k: int, eta: float
) -> ModelVector:
    """``x - (eta / K) * sum of delivered deltas``; nothing delivered leaves ``x`` unchanged."""
    x = as_model_vector(x)
    if k < 1:
        raise ValidationError(f"sample size must be >= 1, got {k}")
    return x - (eta / k) * _weighted_sum(x, delivered, deltas)


def aggregate_ca_fedavg(
    x: ArrayLike,
    delivered: Sequence[int],
    deltas: Mapping[int, ArrayLike],
    failure: ArrayLike,
    k: int,
    eta: float,
) -> ModelVector:
    """Anonymous aggregation with each delivery scaled by ``1 / (1 - q_m)``."""
    x = as_model_vector(x)
    q = np.asarray(failure, dtype=np.float64)
    scale = {}
    for m in set(delivered):
        if q[m] >= 1.0 - LINK_EPS:
            raise DegenerateLink(f"client {m} has failure probability {q[m]}")
        scale[m] = 1.0 / (1.0 - q[m])
    return x - (eta / k) * _weighted_sum(x, delivered, deltas, scale)


@dataclass(frozen=True)
class VarpMemory:
    """Last successfully received delta per client and the round it arrived."""

    last_delta: Mapping[int, ModelVector] = field(default_factory=dict)
    last_round: Mapping[int, int] = field(default_factory=dict)


def multiset_difference(selected: Sequence[int], delivered: Sequence[int]) -> list[int]:
    missing = Counter(selected)
    missing.subtract(Counter(delivered))
    if any(v < 0 for v in missing.values()):
        raise ValidationError(f"delivered {list(delivered)} is not within selected {list(selected)}")
    return sorted(missing.elements())


def aggregate_fedvarp(
    x: ArrayLike,
    selected: Sequence[int],
    delivered: Sequence[int],
    deltas: Mapping[int, ArrayLike],
    memory: VarpMemory,
    k: int,
    eta: float,
    round_: int = 0,
) -> tuple[ModelVector, VarpMemory]:
    """Fill each lost instance with that client's last received delta.

    A client that has never delivered contributes zero.  Memory is refreshed
    only for clients whose update arrived this round.
    """
    x = as_model_vector(x)
    failed = multiset_difference(selected, delivered)
    zero = np.zeros_like(x)
    stale = {m: memory.last_delta.get(m, zero) for m in set(failed)}
    total = _weighted_sum(x, delivered, deltas) + _weighted_sum(x, failed, stale)
    last_delta = dict(memory.last_delta)
    last_round = dict(memory.last_round)
    for m in set(delivered):
        last_delta[m] = np.array(deltas[m], dtype=np.float64)
        last_round[m] = round_
    return x - (eta / k) * total, VarpMemory(last_delta, last_round)


def aggregate_fednova(
    x: ArrayLike,
    delivered: Sequence[int],
    deltas: Mapping[int, ArrayLike],
    l1norms: ArrayLike,
    tau_eff: float,
    k: int,
    eta: float,
) -> ModelVector:
    """Normalize each delivery by ``|a_m|_1`` and step ``eta * tau_eff`` along the average."""
    x = as_model_vector(x)
    a = np.asarray(l1norms, dtype=np.float64)
    if np.any(a[list(set(delivered))] <= 0):
        raise ValidationError("accumulation norms must be positive")
    scale = {m: 1.0 / a[m] for m in set(delivered)}
    return x - (eta * tau_eff / k) * _weighted_sum(x, delivered, deltas, scale)


def counts(ids: NDArray[np.int64], clients: int) -> NDArray[np.int64]:
    """Per-client multiplicities of ``ids`` along the last axis.

    Ids equal to ``clients`` are treated as padding and not counted.
    """
    ids = np.asarray(ids, dtype=np.int64)
    lead = ids.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    offsets = (np.arange(rows, dtype=np.int64) * (clients + 1)).reshape(lead + (1,))
    flat = np.bincount((ids + offsets).ravel(), minlength=rows * (clients + 1))
    return flat.reshape(lead + (clients + 1,))[..., :clients]
