"""Command-line front end: ``estimate``, ``simulate`` and ``benchmark``.

Result files never contain timings or thread counts, so identical seeds give
byte-identical results. Those live in ``manifest.json`` next to them.
Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import estimate_tmle_single
from .crossfit import cv_effects, cv_itmle, write_folds_csv
from .data import SEARCH_KINDS, EstimationConfig, build_subgroups, load_sample
from .designs import family_for_d, generate, subgroups
from .errors import NumericalError, ValidationError
from .nuisance import LearnerSpec, fit_nuisance
from .simulation import HARNESS_ESTIMATORS, DesignSpec, format_table, run_monte_carlo, write_report
from .targeting import itmle

log = logging.getLogger("subtarget")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subtarget",
                                     description="Targeted estimation of subgroup treatment effects.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--output-dir", type=Path)
        p.add_argument("--learner", choices=("logistic", "constant"), default="logistic")
        p.add_argument("--truncate", type=float, default=1e-3, help="propensity floor")
        p.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level")
        p.add_argument("--mc-draws", type=int, default=200_000)
        p.add_argument("--max-iter", type=int, default=500)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--search", choices=SEARCH_KINDS, default="preconditioned",
                       help="direction rule for the one-coefficient updates")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    est = sub.add_parser("estimate", help="estimate subgroup effects on a CSV dataset")
    common(est)
    est.add_argument("--input", type=Path, required=True)
    est.add_argument("--y-col", default="y")
    est.add_argument("--t-col", default="t")
    est.add_argument("--x-cols", type=_str_list)
    est.add_argument("--group-prefix", default="g")
    est.add_argument("--groups-file", type=Path)
    est.add_argument("--outcome", choices=("binary", "continuous"), default="binary")
    est.add_argument("--effect", choices=("risk", "ard", "rr", "or"), default="risk")
    est.add_argument("--arm", type=int, choices=(0, 1), default=1)
    est.add_argument("--crossfit", type=int, default=1, help="number of folds (1 = none)")

    sim = sub.add_parser("simulate", help="Monte Carlo study on a built-in design")
    common(sim)
    sim.add_argument("--design", choices=("main", "alt"), default="alt")
    sim.add_argument("--n", type=_int_list, default=[2000])
    sim.add_argument("--d", type=int, default=4)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--estimators", type=_str_list, default=["itmle", "dr", "glm"])
    sim.add_argument("--misspec", choices=("none", "propensity", "outcome"), default="none")
    sim.add_argument("--arm", type=int, choices=(0, 1), default=1)
    sim.add_argument("--crossfit", type=int, default=3, help="folds used by cv-itmle")
    sim.add_argument("--oracle-draws", type=int, default=10_000_000)

    bench = sub.add_parser("benchmark", help="time per-subgroup TMLE against iTMLE")
    common(bench)
    bench.add_argument("--design", choices=("main", "alt"), default="alt")
    bench.add_argument("--n", type=_int_list, default=[5000])
    bench.add_argument("--d", type=int, default=10)
    bench.add_argument("--reps", type=int, default=3)
    bench.add_argument("--arm", type=int, choices=(0, 1), default=1)
    return parser


def _config(args, folds=1) -> EstimationConfig:
    return EstimationConfig(max_iter=args.max_iter, tol=args.tol, propensity_floor=args.truncate,
                            alpha=args.alpha, mc_draws=args.mc_draws, seed=args.seed,
                            folds=folds, search=args.search)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, config, inputs, started, outputs) -> dict:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    return {
        "schema": 1,
        "command": args.command,
        "argv": sys.argv[1:],
        "arguments": resolved,
        "config": config.to_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seeds": {"master": args.seed, "kappa": args.seed, "folds": args.seed},
        "version": __version__,
        "numpy": np.__version__,
        "threads": args.threads,
        "wall_time_seconds": time.perf_counter() - started,
        "outputs": outputs,
    }


def _interval_rows(labels, iv, extra):
    rows = []
    for j, lab in enumerate(labels):
        row = {"label": lab, "estimate": float(iv.point[j]), "se": float(iv.se[j]),
               "pointwise": [float(iv.pointwise_lo[j]), float(iv.pointwise_hi[j])],
               "simultaneous": [float(iv.simultaneous_lo[j]), float(iv.simultaneous_hi[j])]}
        for k, v in extra.items():
            row[k] = float(v[j])
        rows.append(row)
    return rows


def cmd_estimate(args) -> int:
    started = time.perf_counter()
    config = _config(args, folds=args.crossfit)
    sample = load_sample(args.input, args.y_col, args.t_col, args.x_cols, args.group_prefix,
                         args.outcome)
    spec = None
    if args.groups_file:
        try:
            with open(args.groups_file) as fh:
                spec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read groups file {args.groups_file}: {exc}") from None
    arms = (args.arm,) if args.effect == "risk" else (0, 1)
    groups = build_subgroups(sample, spec, arms)
    learner = LearnerSpec(args.learner)
    labels = list(groups.labels)
    result = {"schema": 1, "command": "estimate", "effect": args.effect, "n": sample.n,
              "subgroup_sizes": groups.sizes().tolist(), "learner": learner.tag,
              "outcome": sample.outcome_type, "level": config.alpha,
              "mc_draws": config.mc_draws, "kappa_seed": config.seed,
              "crossfit_folds": config.folds, "manifest": "manifest.json"}
    if args.effect == "risk":
        res = cv_itmle(sample, groups, args.arm, learner, config)
        iv = res.intervals
        result.update(arm=args.arm, method="itmle" if config.folds == 1 else "cv-itmle",
                      kappa=iv.kappa, iterations=res.fold_iterations.tolist(),
                      score_norm=res.fold_score_norms.tolist(),
                      converged=bool(np.all(res.fold_score_norms <= config.tol)),
                      subgroups=_interval_rows(labels, iv, {f"alpha{args.arm}": res.alpha}),
                      notes=res.notes)
        plan = res.plan
    else:
        if sample.outcome_type != "binary":
            raise ValidationError("effect measures need a binary outcome; use --effect risk")
        res = cv_effects(sample, groups, learner, config, targets=(args.effect,))
        iv = res.intervals[args.effect]
        result.update(method="itmle-joint" if config.folds == 1 else "cv-itmle-joint",
                      kappa=iv.kappa, iterations=res.fold_iterations.tolist(),
                      score_norm=res.fold_score_norms.tolist(),
                      converged=bool(np.all(res.fold_score_norms <= config.tol)),
                      subgroups=_interval_rows(labels, iv, {"alpha1": res.alpha1, "alpha0": res.alpha0}),
                      notes=res.notes)
        plan = res.plan
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.output_dir is None:
        sys.stdout.write(text)
        return EXIT_OK
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(text)
    outputs = ["result.json"]
    if plan is not None:
        write_folds_csv(plan, out / "folds.csv")
        outputs.append("folds.csv")
    _write_json(out / "manifest.json", _manifest(args, config, [args.input] + (
        [args.groups_file] if args.groups_file else []), started, outputs))
    for row in result["subgroups"]:
        print(f"{row['label']:<20} {row['estimate']:.4f}  "
              f"[{row['simultaneous'][0]:.4f}, {row['simultaneous'][1]:.4f}]")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    bad = [e for e in args.estimators if e not in HARNESS_ESTIMATORS]
    if bad:
        raise ValidationError(f"unknown estimator(s) {', '.join(bad)}; valid names: "
                              + ", ".join(HARNESS_ESTIMATORS))
    config = _config(args, folds=args.crossfit)
    spec = DesignSpec(args.design, family_for_d(args.d), args.misspec, args.arm,
                      oracle_draws=args.oracle_draws)
    report = run_monte_carlo(spec, args.estimators, args.reps, args.n, config, args.seed,
                             args.threads, LearnerSpec(args.learner))
    print(format_table(report))
    if args.output_dir is not None:
        paths = write_report(report, args.output_dir, "manifest.json")
        _write_json(args.output_dir / "manifest.json",
                    _manifest(args, config, [], started, [p.name for p in paths.values()]))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    started = time.perf_counter()
    config = _config(args)
    if len(args.n) != 1:
        raise ValidationError("benchmark takes a single --n")
    sample = generate(args.design, args.n[0], args.seed)
    groups = subgroups(family_for_d(args.d), sample)
    learner = LearnerSpec(args.learner)

    def run_single():
        estimate_tmle_single(sample, groups, args.arm, learner, config)

    def run_itmle():
        nu = fit_nuisance(sample, groups, learner, config.propensity_floor)
        itmle(sample, groups, args.arm, nu, config)

    methods = {"tmle-single": run_single, "itmle": run_itmle}
    for f in methods.values():
        f()  # warm-up, discarded
    rows = []
    for rep in range(1, args.reps + 1):
        for name, f in methods.items():
            t0 = time.perf_counter()
            f()
            rows.append((rep, name, time.perf_counter() - t0))
    med = {m: statistics.median(s for _, name, s in rows if name == m) for m in methods}
    ratio = med["itmle"] / med["tmle-single"]
    print(f"{'method':<12}{'median seconds':>16}")
    for m, v in med.items():
        print(f"{m:<12}{v:>16.4f}")
    print(f"itmle / tmle-single time ratio: {ratio:.3f}")
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        with open(args.output_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rep", "method", "seconds"])
            w.writerows([r, m, repr(s)] for r, m, s in rows)
            for m, v in med.items():
                w.writerow(["median", m, repr(v)])
            w.writerow(["ratio", "itmle/tmle-single", repr(ratio)])
        _write_json(args.output_dir / "manifest.json",
                    _manifest(args, config, [], started, ["timing.csv"]))
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    level = os.environ.get("SUBTARGET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", 1) < 1:
            raise ValidationError("--threads must be positive")
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
