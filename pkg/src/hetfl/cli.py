"""Command-line entry point: ``hetfl simulate`` and ``hetfl analyze``.

Exit status is 0 on success, 2 for configuration errors and 3 when the
simulation blows up numerically; failing to write the output file exits 1.
Diagnostics go to stderr.  stdout carries a single summary line for
``simulate`` and the requested table for ``analyze``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

import numpy as np

from .analysis import calibrate_step_lengths, codesign_solve, effective_step_factor
from .config import PRESETS, ExperimentConfig, load
from .engine import run_experiment
from .errors import HetflError, NumericalBlowup, ParseError, UnknownPreset, ValidationError
from .report import emit_csv, metric_rows
from .solvers import accumulation_vector

log = logging.getLogger("hetfl")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3


def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--preset", choices=PRESETS, help="shipped preset; --config, if given, overrides its keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the configured algorithms and write per-round metrics")
    _add_source(sim)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--rounds", type=int)
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out", help="CSV output path (default: [experiment] out)")

    ana = sub.add_parser("analyze", help="closed-form analyses of a config's population")
    ana.add_argument("what", choices=("codesign", "calibrate"))
    _add_source(ana)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None and args.preset is None:
        raise ValidationError("give --config or --preset")
    return load(path=args.config, preset_name=args.preset)


def _simulate(args: argparse.Namespace) -> str:
    cfg = _load(args).with_overrides(seed=args.seed, replicates=args.replicates, rounds=args.rounds)
    if cfg.replicates < 1 or cfg.rounds < 1 or args.jobs < 1:
        raise ValidationError("replicates, rounds and jobs must be >= 1")
    out = args.out or cfg.out
    if out is None:
        raise ValidationError("give --out or set [experiment] out")
    log.info("running %d algorithm(s) x %d replicate(s) x %d rounds", len(cfg.runs), cfg.replicates, cfg.rounds)
    result = run_experiment(
        cfg.problem,
        cfg.runs,
        cfg.sample_size,
        cfg.rounds,
        cfg.seed,
        cfg.replicates,
        x0=cfg.x0,
        log_every=cfg.log_every,
        jobs=args.jobs,
    )
    rows = emit_csv(metric_rows(result), out)
    finals = ", ".join(f"{tr.label}={np.mean(tr.metrics['dist_true'][:, -1]):.6g}" for tr in result)
    return f"wrote {rows} rows to {out}; mean final dist_true: {finals}"


def _codesign(cfg: ExperimentConfig) -> str:
    """Complete q from the default schedule's round-0 step counts, anchored at client 0."""
    pop = cfg.population
    steps, failure = pop.round_values(0)
    l1 = np.array([accumulation_vector(p.solver, int(steps[p.id]), cfg.learning_rate).l1 for p in pop.profiles])
    res = codesign_solve(pop.weights, (float(failure[0]), float(l1[0])), l1norms=l1)
    lines = ["client,q,l1"]
    lines += [f"{m},{float(res.failure[m])!r},{float(res.l1norms[m])!r}" for m in range(pop.size)]
    lines.append(f"eta_eff={res.eta_eff!r} t_eff={res.t_eff!r}")
    return "\n".join(lines)


def _calibrate(cfg: ExperimentConfig) -> str:
    pop = cfg.population
    etas = calibrate_step_lengths(cfg.learning_rate, pop)
    steps, failure = pop.round_values(0)
    l1 = [accumulation_vector(p.solver, int(steps[p.id]), cfg.learning_rate).l1 for p in pop.profiles]
    lines = ["algorithm,eta,effective_step"]
    for alg, eta in etas.items():
        lines.append(f"{alg.value},{float(eta)!r},{eta * effective_step_factor(alg, pop.weights, failure, l1)!r}")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "simulate":
            out = _simulate(args)
        else:
            cfg = _load(args)
            out = _codesign(cfg) if args.what == "codesign" else _calibrate(cfg)
    except NumericalBlowup as exc:
        print(f"error: numerical blowup: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ValidationError, ParseError, UnknownPreset, HetflError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
