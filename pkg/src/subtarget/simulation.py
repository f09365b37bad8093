"""Monte Carlo harness: replicate estimators on simulated data and score them.

Replication ``r`` at sample size ``n`` draws its data from a stream keyed by
``(seed, n, r)`` so any subset of replications, run on any number of
worker processes, reproduces the same rows. Metrics per estimator and
``n``:

* ``scaled_bias``: ``sqrt(n) * sum_j |mean_r(estimate) - truth_j|``
* ``scaled_sd``: ``sqrt(n) * sum_j sd_r(estimate)``
* ``fwer``: share of replications where a simultaneous interval misses
* ``coverage``: per-subgroup share of pointwise intervals covering the truth
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import ESTIMATORS, check_estimators, estimate_tmle_single
from .crossfit import cv_itmle
from .data import EstimationConfig
from .designs import (canonical_design, family_for_d, generate, generate_alternative,  # noqa: F401
                      generate_main, subgroups, true_parameters)
from .errors import SubtargetError, ValidationError
from .nuisance import LearnerSpec, fit_nuisance

log = logging.getLogger(__name__)

HARNESS_ESTIMATORS = tuple(ESTIMATORS) + ("cv-itmle",)
MISSPEC = ("none", "propensity", "outcome")


@dataclass(frozen=True)
class DesignSpec:
    design: str = "alternative"
    family: str = "overlapping4"
    misspecification: str = "none"
    arm: int = 1
    treatment_coef: float = 1.0
    oracle_draws: int = 10_000_000
    oracle_seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "design", canonical_design(self.design))
        if self.misspecification not in MISSPEC:
            raise ValidationError(f"misspecification must be one of {', '.join(MISSPEC)}")
        if self.arm not in (0, 1):
            raise ValidationError("arm must be 0 or 1")


def replication_seed(seed: int, n: int, rep: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(n), int(rep)])
    return int(ss.generate_state(1, np.uint64)[0])


def _learners(spec: DesignSpec, learner: LearnerSpec):
    const = LearnerSpec("constant")
    return dict(
        propensity_spec=const if spec.misspecification == "propensity" else learner,
        outcome_spec=const if spec.misspecification == "outcome" else learner,
    )


def _run_one(args):
    spec, names, n, rep, seed, config, learner = args
    sample = generate(spec.design, n, replication_seed(seed, n, rep), spec.treatment_coef)
    groups = subgroups(spec.family, sample)
    kw = _learners(spec, learner)
    results, failures = {}, {}
    nuisance = None
    for name in names:
        label = name.__name__ if callable(name) else name
        try:
            if callable(name):
                est = name(sample, groups, spec.arm, config)
            elif name == "tmle-single":
                est = estimate_tmle_single(sample, groups, spec.arm, learner, config, **kw)
            elif name == "cv-itmle":
                res = cv_itmle(sample, groups, spec.arm, learner,
                               config if config.folds > 1 else _with_folds(config, 3), **kw)
                est = res.intervals
            else:
                if nuisance is None:
                    nuisance = fit_nuisance(sample, groups, learner, config.propensity_floor, **kw)
                est = ESTIMATORS[name](sample, groups, spec.arm, nuisance, config)
            iv = getattr(est, "intervals", est)
            results[label] = (iv.point, iv.pointwise_lo, iv.pointwise_hi,
                              iv.simultaneous_lo, iv.simultaneous_hi)
        except SubtargetError as exc:
            failures[label] = f"{type(exc).__name__}: {exc}"
    return n, rep, results, failures


def _with_folds(config, V):
    d = config.to_dict()
    d["folds"] = V
    return EstimationConfig(**d)


@dataclass
class SimulationReport:
    """Aggregated metrics plus the per-replication rows they came from."""

    spec: dict
    config: dict
    seed: int
    reps: int
    sizes: list
    labels: list
    truth: list
    truth_se: list
    metrics: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def metric(self, estimator: str, n: int) -> dict:
        for m in self.metrics:
            if m["estimator"] == estimator and m["n"] == n:
                return m
        raise KeyError((estimator, n))

    def to_dict(self) -> dict:
        return {"schema": 1, **asdict(self)}


def _aggregate(name, n, reps_out, truth, failures):
    pts = np.array([r[0] for r in reps_out]) if reps_out else np.empty((0, len(truth)))
    m = pts.shape[0]
    out = dict(estimator=name, n=n, successes=m, failures=failures)
    if m == 0:
        out.update(scaled_bias=None, scaled_sd=None, fwer=None, fwer_mc_se=None, coverage=None)
        return out
    mean = pts.mean(axis=0)
    sd = pts.std(axis=0, ddof=1) if m > 1 else np.zeros(len(truth))
    pw = np.array([(r[1] <= truth) & (truth <= r[2]) for r in reps_out])
    sim = np.array([(r[3] <= truth) & (truth <= r[4]) for r in reps_out])
    fwer = float(np.mean(~sim.all(axis=1)))
    out.update(
        mean=mean.tolist(),
        bias=(mean - truth).tolist(),
        scaled_bias=float(math.sqrt(n) * np.sum(np.abs(mean - truth))),
        scaled_sd=float(math.sqrt(n) * np.sum(sd)),
        fwer=fwer,
        fwer_mc_se=float(math.sqrt(fwer * (1 - fwer) / m)),
        coverage=pw.mean(axis=0).tolist(),
        simultaneous_coverage=sim.mean(axis=0).tolist(),
    )
    return out


def run_monte_carlo(spec: DesignSpec, estimators, reps: int, n, config: EstimationConfig = EstimationConfig(),
                    seed: int = 0, threads: int = 1, learner: LearnerSpec = LearnerSpec(),
                    truth: dict | None = None) -> SimulationReport:
    """Replicate ``estimators`` ``reps`` times at each sample size in ``n``.

    ``estimators`` holds registry names (see ``HARNESS_ESTIMATORS``) or
    callables ``f(sample, groups, arm, config)`` returning an object with
    interval attributes. Failures of single estimator runs are recorded and
    counted, not raised.
    """
    sizes = [int(n)] if np.isscalar(n) else [int(v) for v in n]
    names = [e for e in estimators]
    strs = [e for e in names if not callable(e)]
    bad = [e for e in strs if e not in HARNESS_ESTIMATORS]
    if bad:
        check_estimators(bad)
    if reps < 1:
        raise ValidationError("reps must be positive")
    if threads < 1:
        raise ValidationError("threads must be positive")
    if truth is None:
        truth = true_parameters(spec.design, spec.family, spec.oracle_draws, spec.oracle_seed,
                                spec.treatment_coef)
    alpha = np.asarray(truth[f"alpha{spec.arm}"])

    tasks = [(spec, names, size, r, seed, config, learner) for size in sizes for r in range(reps)]
    if threads == 1:
        outs = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    outs.sort(key=lambda o: (o[0], o[1]))

    labels = list(truth["labels"])
    report = SimulationReport(asdict(spec), config.to_dict(), int(seed), int(reps), sizes, labels,
                              alpha.tolist(), np.asarray(truth[f"se{spec.arm}"]).tolist())
    report.notes = {
        "scaled_bias": "sqrt(n) * sum over subgroups of |mean estimate - truth|",
        "scaled_sd": "sqrt(n) * plain sum over subgroups of replication standard deviations",
        "misspecification": "intercept-only learner for the named nuisance",
        "learner": learner.tag,
    }
    keys = [e.__name__ if callable(e) else e for e in names]
    for size in sizes:
        for key in keys:
            good = [(rep, res[key]) for nn, rep, res, _ in outs if nn == size and key in res]
            fails = sum(1 for nn, _, _, f in outs if nn == size and key in f)
            report.metrics.append(_aggregate(key, size, [g for _, g in good], alpha, fails))
            for rep, (pt, plo, phi, slo, shi) in good:
                for j, lab in enumerate(labels):
                    report.rows.append(dict(
                        n=size, replication=rep, estimator=key, subgroup=lab,
                        estimate=float(pt[j]), lo=float(slo[j]), hi=float(shi[j]),
                        covered=int(slo[j] <= alpha[j] <= shi[j]),
                        pointwise_lo=float(plo[j]), pointwise_hi=float(phi[j]),
                        pointwise_covered=int(plo[j] <= alpha[j] <= phi[j])))
    for nn, rep, _, f in outs:
        for key, msg in f.items():
            report.failures.append(dict(n=nn, replication=rep, estimator=key, error=msg))
    return report


ROW_FIELDS = ("n", "replication", "estimator", "subgroup", "estimate", "lo", "hi", "covered",
              "pointwise_lo", "pointwise_hi", "pointwise_covered")
PLOT_FIELDS = ("n", "estimator", "scaled_bias", "scaled_sd", "fwer", "fwer_mc_se", "failures")


def write_report(report: SimulationReport, outdir, manifest_name: str | None = None) -> dict:
    """Write aggregate JSON, per-replication CSV and plot-ready CSV into ``outdir``."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {k: outdir / v for k, v in
             dict(aggregate="aggregate.json", replications="replications.csv", plot="plot.csv").items()}
    doc = report.to_dict()
    doc.pop("rows")
    if manifest_name:
        doc["manifest"] = manifest_name
    with open(paths["aggregate"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["replications"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for row in report.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(paths["plot"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PLOT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for m in report.metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in m.items()})
    return paths


def format_table(report: SimulationReport) -> str:
    head = f"{'estimator':<14}{'n':>7}{'scaled_bias':>13}{'scaled_sd':>11}{'fwer':>8}{'mc_se':>8}{'fail':>6}"
    lines = [head, "-" * len(head)]

    def f(v, w, p):
        return f"{v:>{w}.{p}f}" if v is not None else f"{'-':>{w}}"

    for m in report.metrics:
        lines.append(f"{m['estimator']:<14}{m['n']:>7}{f(m['scaled_bias'], 13, 3)}"
                     f"{f(m['scaled_sd'], 11, 3)}{f(m['fwer'], 8, 3)}{f(m['fwer_mc_se'], 8, 3)}"
                     f"{m['failures']:>6}")
    return "\n".join(lines)
