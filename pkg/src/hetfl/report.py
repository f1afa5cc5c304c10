"""CSV emission of logged metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .engine import METRICS, ExperimentResult
from .errors import ValidationError

HEADER = ("replicate", "round", "algorithm") + METRICS


@dataclass(frozen=True)
class MetricRow:
    replicate: int
    round: int
    algorithm: str
    metrics: Mapping[str, float]


def metric_rows(result: ExperimentResult) -> Iterator[MetricRow]:
    """Rows ordered by (replicate, round, algorithm in run order).

    ``round`` counts completed rounds, so the first logged update is round 1.
    """
    traces = list(result)
    if not traces:
        return
    n = len(traces[0].seeds)
    for i in range(n):
        for j, r in enumerate(traces[0].rounds.tolist()):
            for tr in traces:
                yield MetricRow(i, r + 1, tr.label, {k: float(tr.metrics[k][i, j]) for k in METRICS})


def emit_csv(records: Iterable[MetricRow], path: str | Path) -> int:
    """Write ``records`` to ``path`` and return the number of data rows.

    Reals are written with ``repr``, the shortest string that round-trips.
    """
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for rec in records:
            writer.writerow([rec.replicate, rec.round, rec.algorithm] + [repr(float(rec.metrics[k])) for k in METRICS])
            count += 1
    if count == 0:
        raise ValidationError("no records to write")
    return count
