"""Command line interface.

Three subcommands cover the batch workflows:

* ``estimate``  hazards, transition probabilities and confidence
  intervals for one dataset against a rate table;
* ``simulate``  a full scenario study with a performance report;
* ``truth``     just the true estimand values of a scenario.

Every run writes a ``manifest.json`` (inputs with SHA-256 hashes, seed,
version, timings) next to the outputs, so a run can be reproduced
bit-identically; the figures rendered alongside the CSVs can be turned
off with ``--no-plots``.  The rate-table argument is also resolved
against ``$RELMSM_RATETABLE_DIR`` when it is not a direct path.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import secrets
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import DataValidationError, load_dataset
from .engine import Design
from .hazards import EstimationError, estimate_all, hazards_frame
from .inference import (
    CI_METHODS,
    TargetEstimate,
    bootstrap,
    confidence_interval,
    intervals_frame,
)
from .model import ModelError, model_from_json
from .probtrans import aalen_johansen, probtrans_frame
from .ratetable import RateTableError, load_ratetable
from .simulate import (
    SCENARIO_NAMES,
    QuadratureError,
    builtin_scenario,
    load_scenario,
    report_long,
    run_study,
    true_values,
)

RATETABLE_DIR_ENV = "RELMSM_RATETABLE_DIR"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _resolve_ratetable(arg: str | None) -> Path | None:
    if arg is None:
        return None
    p = Path(arg)
    if p.exists():
        return p
    env_dir = os.environ.get(RATETABLE_DIR_ENV)
    if env_dir and (Path(env_dir) / arg).exists():
        return Path(env_dir) / arg
    raise FileNotFoundError(
        f"rate table {arg!r} not found (also looked in ${RATETABLE_DIR_ENV})"
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, options: dict,
                    inputs: dict, outputs: list[Path], t0: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "options": options,
        "inputs": {
            name: {"path": str(p), "sha256": _sha256(Path(p))}
            for name, p in inputs.items()
        },
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.time() - t0, 3),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def _seed_from(args) -> int:
    if args.seed is None:
        seed = secrets.randbelow(2**31)
        print(f"generated seed: {seed}", file=sys.stderr)
        return seed
    return args.seed


def _parse_ci_methods(spec: str) -> tuple[str, ...]:
    if spec == "all":
        return CI_METHODS
    methods = tuple(s.strip() for s in spec.split(","))
    for m in methods:
        if m not in CI_METHODS:
            raise ValueError(f"unknown CI method {m!r} (choose from {CI_METHODS})")
    return methods


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed_from(args)
    methods = _parse_ci_methods(args.ci)
    if args.boot < 2 and any(m != "plain.G" for m in methods):
        raise ValueError("bootstrap methods require --boot >= 2")

    model = model_from_json(args.model)
    rt_path = _resolve_ratetable(args.ratetable)
    table = load_ratetable(rt_path) if rt_path else None
    dataset = load_dataset(args.data, model, age_unit=args.age_unit)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        estimates = estimate_all(dataset, table, dense=args.dense)
        pt = aalen_johansen(
            estimates, model, s=args.s, t_max=args.t_max, dense=args.dense,
            cov="greenwood",
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    if model.split_map and "plain.G" in methods:
        print(
            "warning: plain.G yields zero-width intervals for population "
            "hazards (their closed-form variance is zero by assumption); "
            "coverage is anti-conservative for population-related targets",
            file=sys.stderr,
        )

    outputs = []
    haz_path = out_dir / "hazards.csv"
    hazards_frame(estimates, model, dense=args.dense).to_csv(haz_path, index=False)
    outputs.append(haz_path)
    prob_path = out_dir / "probabilities.csv"
    probtrans_frame(pt).to_csv(prob_path, index=False)
    outputs.append(prob_path)

    intervals = []
    need_boot = any(m != "plain.G" for m in methods)
    boot = None
    if need_boot:
        design = Design(
            dataset, table, s=args.s,
            t_max=args.t_max if args.t_max is not None else dataset.horizon,
            start_state=args.start_state,
        )
        boot = bootstrap(dataset, table, B=args.boot, seed=seed, design=design)
        if boot.n_bad_replicates:
            print(
                f"warning: {boot.n_bad_replicates} of {args.boot} bootstrap "
                f"replicates left some transition without risk set; affected "
                f"targets are missing there",
                file=sys.stderr,
            )
    for tr in model.extended_transitions:
        est = estimates[tr.trans_id]
        te = TargetEstimate(
            ("hazard", tr.trans_id), est.times, est.values, est.variance
        )
        bt = boot.target_at(("hazard", tr.trans_id), est.times) if boot else None
        for m in methods:
            intervals.append(confidence_interval(m, est=te, boot=bt, level=args.level))
    start_ext = model.ext_of_state.get(args.start_state)
    if start_ext is None:
        raise ModelError(f"start state {args.start_state} has no extended image")
    for j in range(1, model.n_ext_states + 1):
        te = TargetEstimate(
            ("prob", j),
            pt.times,
            pt.prob_series(start_ext, j),
            pt.variance_series(start_ext, j),
        )
        bt = boot.target_at(("prob", j), pt.times) if boot else None
        for m in methods:
            intervals.append(confidence_interval(m, est=te, boot=bt, level=args.level))
    ci_path = out_dir / "intervals.csv"
    intervals_frame(intervals).to_csv(ci_path, index=False)
    outputs.append(ci_path)

    if not args.no_plots:
        from . import report

        outputs.append(report.fig_hazards(estimates, model, out_dir / "hazards.png"))
        outputs.append(
            report.fig_probabilities(
                pt, out_dir / "probabilities.png", from_state=start_ext
            )
        )

    inputs = {"data": args.data, "model": args.model}
    if rt_path:
        inputs["ratetable"] = rt_path
    options = {
        "s": args.s, "t_max": args.t_max, "dense": args.dense, "boot": args.boot,
        "seed": seed, "ci": list(methods), "level": args.level,
        "start_state": args.start_state, "age_unit": args.age_unit,
    }
    _write_manifest(out_dir, "estimate", options, inputs, outputs, t0)
    print(f"wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / truth


def _load_scenario_arg(args):
    if args.scenario in SCENARIO_NAMES:
        return builtin_scenario(args.scenario, n=args.n, n_sim=args.n_sim), None
    cfg = load_scenario(args.scenario, n=args.n, n_sim=args.n_sim)
    return cfg, Path(args.scenario)


def cmd_simulate(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed_from(args)
    methods = _parse_ci_methods(args.ci)
    cfg, scenario_path = _load_scenario_arg(args)
    rt_path = _resolve_ratetable(args.ratetable)
    table = load_ratetable(rt_path)

    truth = true_values(
        cfg, table, method=args.truth_method, draws=args.truth_draws, seed=seed
    )
    report_df = run_study(
        cfg, table, seed=seed, B=args.boot, ci_methods=methods,
        level=args.level, threads=args.threads, truth=truth,
    )

    outputs = []
    rep_path = out_dir / "report.csv"
    report_df.to_csv(rep_path, index=False)
    outputs.append(rep_path)
    long_path = out_dir / "report_long.csv"
    report_long(report_df).to_csv(long_path, index=False)
    outputs.append(long_path)
    truth_path = out_dir / "truth.csv"
    truth.to_frame().to_csv(truth_path, index=False)
    outputs.append(truth_path)

    if not args.no_plots:
        from . import report

        outputs.append(report.fig_relative_bias(report_df, out_dir / "bias.png"))
        outputs.append(report.fig_standard_errors(report_df, out_dir / "se.png"))
        outputs.append(
            report.fig_coverage(report_df, out_dir / "coverage.png", level=args.level)
        )

    inputs = {"ratetable": rt_path}
    if scenario_path:
        inputs["scenario"] = scenario_path
    options = {
        "scenario": cfg.name, "n": cfg.n, "n_sim": cfg.n_sim, "boot": args.boot,
        "seed": seed, "ci": list(methods), "level": args.level,
        "threads": args.threads, "truth_method": args.truth_method,
        "truth_draws": args.truth_draws,
    }
    _write_manifest(out_dir, "simulate", options, inputs, outputs, t0)
    print(f"wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_truth(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed_from(args)
    cfg, scenario_path = _load_scenario_arg(args)
    rt_path = _resolve_ratetable(args.ratetable)
    table = load_ratetable(rt_path)
    tv = true_values(
        cfg, table, method=args.method, draws=args.draws, seed=seed, tol=args.tol
    )
    truth_path = out_dir / "truth.csv"
    tv.to_frame().to_csv(truth_path, index=False)
    inputs = {"ratetable": rt_path}
    if scenario_path:
        inputs["scenario"] = scenario_path
    options = {
        "scenario": cfg.name, "n": cfg.n, "method": args.method,
        "draws": args.draws, "tol": args.tol, "seed": seed,
    }
    _write_manifest(out_dir, "truth", options, inputs, [truth_path], t0)
    print(f"wrote {truth_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relmsm",
        description="Multi-state survival estimation with excess/population "
        "splitting against mortality tables",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate one dataset")
    est.add_argument("--data", required=True, help="long-format event CSV")
    est.add_argument("--model", required=True, help="model JSON")
    est.add_argument("--ratetable", help="rate-table CSV (path or name under "
                     f"${RATETABLE_DIR_ENV})")
    est.add_argument("-s", type=float, default=0.0, help="conditioning time (days)")
    est.add_argument("--t-max", type=float, default=None, help="horizon (days)")
    est.add_argument("--dense", action="store_true",
                     help="also evaluate on the daily grid")
    est.add_argument("--boot", type=int, default=100, help="bootstrap replicates")
    est.add_argument("--seed", type=int, default=None)
    est.add_argument("--ci", default="all",
                     help="comma list of plain.G,plain.boot,log.boot,q.boot or 'all'")
    est.add_argument("--level", type=float, default=0.95)
    est.add_argument("--start-state", type=int, default=1,
                     help="state whose probability row is reported")
    est.add_argument("--age-unit", choices=("days", "years"), default="days")
    est.add_argument("--out", default="relmsm-out")
    est.add_argument("--no-plots", action="store_true")
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser("simulate", help="run a scenario study")
    sim.add_argument("--scenario", required=True,
                     help=f"builtin name {SCENARIO_NAMES} or a JSON path")
    sim.add_argument("--ratetable", required=True)
    sim.add_argument("--n", type=int, default=None, help="sample size per run")
    sim.add_argument("--n-sim", type=int, default=None, help="replications")
    sim.add_argument("--boot", type=int, default=100)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--ci", default="all")
    sim.add_argument("--level", type=float, default=0.95)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--truth-method", choices=("mc", "quadrature"), default="mc")
    sim.add_argument("--truth-draws", type=int, default=10**6)
    sim.add_argument("--out", default="relmsm-sim")
    sim.add_argument("--no-plots", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("truth", help="true estimand values of a scenario")
    tr.add_argument("--scenario", required=True)
    tr.add_argument("--ratetable", required=True)
    tr.add_argument("--n", type=int, default=None)
    tr.add_argument("--n-sim", type=int, default=None)
    tr.add_argument("--method", choices=("mc", "quadrature"), default="mc")
    tr.add_argument("--draws", type=int, default=10**6)
    tr.add_argument("--tol", type=float, default=1e-6)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default="relmsm-truth")
    tr.set_defaults(func=cmd_truth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataValidationError, ModelError, RateTableError, FileNotFoundError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, QuadratureError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
