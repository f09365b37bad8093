"""V-fold cross-fitted iTMLE.

Nuisances for fold ``v`` are fitted on the other folds; targeting, subgroup
proportions and the fold estimate use fold ``v``'s rows only. Fold
estimates are averaged with :func:`math.fsum`, which makes the result exactly
invariant to relabelling the folds. Intervals use the influence function
pooled across validation folds and centred at the averaged estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import EstimationConfig, ObservedSample, SubgroupFamily
from .errors import SubtargetError, ValidationError
from .inference import IntervalSet, eif_effect, eif_risk, infer
from .nuisance import LearnerSpec, fit_nuisance
from .targeting import effect_measures, itmle, itmle_continuous, joint_target_effects

MAX_PLAN_ATTEMPTS = 100
POOLED_NOTE = "pooled validation-fold influence function at the averaged estimate"


@dataclass(frozen=True, eq=False)
class FoldPlan:
    assignments: np.ndarray
    V: int
    seed: int
    attempts: int = 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.V + 1)[1:]

    def relabel(self, perm) -> "FoldPlan":
        """Plan with fold ``v`` renamed ``perm[v - 1]``."""
        perm = np.asarray(perm)
        return FoldPlan(perm[self.assignments - 1], self.V, self.seed, self.attempts)


def _fold_ok(plan, t, masks, V):
    for v in range(1, V + 1):
        rows = plan == v
        for arm in (0, 1):
            inarm = rows & (t == arm)
            if not inarm.any() or not np.all(masks[inarm].any(axis=0)):
                return False
    return True


def plan_folds(sample: ObservedSample, groups: SubgroupFamily, V: int, seed: int) -> FoldPlan:
    """Random balanced partition into ``V`` folds labelled ``1..V``.

    Every fold must contain members of every subgroup in both arms; plans
    violating this are redrawn up to ``MAX_PLAN_ATTEMPTS`` times.
    """
    n = sample.n
    if V < 2:
        raise ValidationError("cross-fitting needs V >= 2 folds")
    if n < 2 * V:
        raise ValidationError(f"n={n} is too small for {V} folds")
    for attempt in range(MAX_PLAN_ATTEMPTS):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7001, attempt])))
        perm = rng.permutation(n)
        folds = np.empty(n, dtype=int)
        folds[perm] = np.arange(n) % V + 1
        if _fold_ok(folds, sample.t, groups.masks, V):
            folds.setflags(write=False)
            return FoldPlan(folds, V, seed, attempt + 1)
    raise ValidationError(
        f"could not place every subgroup in both arms of all {V} folds after "
        f"{MAX_PLAN_ATTEMPTS} attempts; use fewer folds or larger subgroups")


def write_folds_csv(plan: FoldPlan, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "fold"])
        for i, v in enumerate(plan.assignments, start=1):
            w.writerow([i, int(v)])


def _average(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    return np.array([math.fsum(rows[:, j]) / rows.shape[0] for j in range(rows.shape[1])])


@dataclass(frozen=True, eq=False)
class CrossFitResult:
    arm: int
    alpha: np.ndarray
    fold_alpha: np.ndarray
    fold_score_norms: np.ndarray
    fold_iterations: np.ndarray
    p_pooled: np.ndarray
    e_pooled: np.ndarray
    plan: FoldPlan | None
    intervals: IntervalSet | None = None
    notes: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class CrossFitEffects:
    alpha1: np.ndarray
    alpha0: np.ndarray
    effects: dict
    intervals: dict
    fold_alpha1: np.ndarray
    fold_alpha0: np.ndarray
    fold_score_norms: np.ndarray
    fold_iterations: np.ndarray
    p1: np.ndarray
    p0: np.ndarray
    e1: np.ndarray
    plan: FoldPlan | None
    notes: dict = field(default_factory=dict)


def fold_nuisance(sample, groups, v, plan, spec, config, kw=None):
    """Nuisances for validation fold ``v``, fitted on the other folds only.

    Returns the fold's row indices, its sample and subgroups, and the
    nuisance predictions restricted to those rows.
    """
    kw = kw or {}
    train = plan.assignments != v
    rows = np.flatnonzero(~train)
    try:
        full = fit_nuisance(sample, groups, spec, config.propensity_floor, train=train, **kw)
    except SubtargetError as exc:
        raise type(exc)(f"fold {v}: {exc}") from exc
    sub = sample.subset(rows)
    gsub = groups.subset(rows)
    return rows, sub, gsub, full.subset(rows, gsub)


def _targeter(sample):
    return itmle_continuous if sample.outcome_type == "continuous" else itmle


def cv_itmle(sample: ObservedSample, groups: SubgroupFamily, arm: int,
             spec: LearnerSpec = LearnerSpec(), config: EstimationConfig = EstimationConfig(),
             plan: FoldPlan | None = None, *, propensity_spec=None,
             outcome_spec=None, intervals: bool = True) -> CrossFitResult:
    """Cross-fitted iTMLE for one arm; ``config.folds == 1`` uses the full sample.

    Continuous outcomes use the least-squares fluctuation.
    """
    kw = dict(propensity_spec=propensity_spec, outcome_spec=outcome_spec)
    if config.folds == 1 and plan is None:
        nu = fit_nuisance(sample, groups, spec, config.propensity_floor, **kw)
        alpha, fit = _targeter(sample)(sample, groups, arm, nu, config)
        p, e = fit.p_updated, nu.e(arm)
        res = dict(fold_alpha=alpha[None, :], fold_score_norms=np.array([fit.score_norm]),
                   fold_iterations=np.array([fit.iterations_used]), plan=None, notes={})
    else:
        if plan is None:
            plan = plan_folds(sample, groups, config.folds, config.seed)
        p = np.empty(sample.n)
        e = np.empty(sample.n)
        fa, norms, its = [], [], []
        for v in range(1, plan.V + 1):
            rows, sub, gsub, nu = fold_nuisance(sample, groups, v, plan, spec, config, kw)
            try:
                a_v, fit = _targeter(sample)(sub, gsub, arm, nu, config)
            except SubtargetError as exc:
                raise type(exc)(f"fold {v}: {exc}") from exc
            p[rows], e[rows] = fit.p_updated, nu.e(arm)
            fa.append(a_v)
            norms.append(fit.score_norm)
            its.append(fit.iterations_used)
        alpha = _average(fa)
        res = dict(fold_alpha=np.array(fa), fold_score_norms=np.array(norms),
                   fold_iterations=np.array(its), plan=plan, notes={"variance": POOLED_NOTE})
    iv = None
    if intervals:
        eif = eif_risk(sample, groups, arm, p, e, alpha)
        iv = infer(eif, config.alpha, config.mc_draws, config.seed)
    return CrossFitResult(arm, alpha, p_pooled=p, e_pooled=e, intervals=iv, **res)


def cv_effects(sample: ObservedSample, groups: SubgroupFamily,
               spec: LearnerSpec = LearnerSpec(), config: EstimationConfig = EstimationConfig(),
               plan: FoldPlan | None = None, targets=("ard", "rr", "or"), *,
               propensity_spec=None, outcome_spec=None) -> CrossFitEffects:
    """Cross-fitted two-arm targeting mapped to effect measures.

    Both arms are targeted jointly in every fold; the arm risks are averaged
    across folds and then mapped to ``targets``.
    """
    kw = dict(propensity_spec=propensity_spec, outcome_spec=outcome_spec)
    if config.folds == 1 and plan is None:
        nu = fit_nuisance(sample, groups, spec, config.propensity_floor, **kw)
        a1, a0, fit = joint_target_effects(sample, groups, nu, config)
        p1, p0, e1 = fit.p1, fit.p0, nu.e1
        fa1, fa0 = a1[None, :], a0[None, :]
        norms, its = fit.score_norms[None, :], np.array([fit.iterations_used])
        notes = {}
    else:
        if plan is None:
            plan = plan_folds(sample, groups, config.folds, config.seed)
        p1, p0, e1 = (np.empty(sample.n) for _ in range(3))
        fa1, fa0, norms, its = [], [], [], []
        for v in range(1, plan.V + 1):
            rows, sub, gsub, nu = fold_nuisance(sample, groups, v, plan, spec, config, kw)
            try:
                b1, b0, fit = joint_target_effects(sub, gsub, nu, config)
            except SubtargetError as exc:
                raise type(exc)(f"fold {v}: {exc}") from exc
            p1[rows], p0[rows], e1[rows] = fit.p1, fit.p0, nu.e1
            fa1.append(b1)
            fa0.append(b0)
            norms.append(fit.score_norms)
            its.append(fit.iterations_used)
        a1, a0 = _average(fa1), _average(fa0)
        fa1, fa0, norms, its = map(np.array, (fa1, fa0, norms, its))
        notes = {"variance": POOLED_NOTE}
    effects = effect_measures(a1, a0, targets, list(groups.labels))
    ivs = {}
    for tgt in targets:
        eif = eif_effect(sample, groups, p1, p0, e1, a1, a0, tgt)
        ivs[tgt] = infer(eif, config.alpha, config.mc_draws, config.seed, point=effects[tgt])
    return CrossFitEffects(a1, a0, effects, ivs, fa1, fa0, norms, its, p1, p0, e1, plan, notes)
