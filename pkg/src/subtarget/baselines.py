"""Comparison estimators of subgroup risks with influence-function intervals.

All estimators return a :class:`SubgroupEstimate`. ``dr``, ``glm`` and
``ipw`` average over all members of each subgroup; ``ipw`` is the
unnormalised Horvitz-Thompson form. ``tmle-single`` refits the nuisance
models inside every subgroup and targets each one separately.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data import EstimationConfig, SubgroupFamily
from .errors import SubtargetError, ValidationError
from .inference import EifMatrix, IntervalSet, build_intervals, eif_risk, infer
from .nuisance import LearnerSpec, NuisanceFit, fit_nuisance
from .targeting import classical_single_tmle, clever_matrix, itmle, onestep_multi


@dataclass(frozen=True, eq=False)
class SubgroupEstimate:
    method: str
    arm: int
    point: np.ndarray
    sigma: np.ndarray
    intervals: IntervalSet
    eif: EifMatrix | None = None
    notes: dict = field(default_factory=dict)
    seconds: float = 0.0


BaselineEstimate = SubgroupEstimate


def _finish(method, arm, eif, config, notes=None, seconds=0.0, point=None):
    iv = infer(eif, config.alpha, config.mc_draws, config.seed, point=point)
    return SubgroupEstimate(method, arm, iv.point, iv.sigma, iv, eif, notes or {}, seconds)


def _subgroup_mean(groups, values):
    m = groups.masks
    return (m * values[:, None]).sum(axis=0) / m.sum(axis=0)


def estimate_dr(sample, groups, arm, nuisance: NuisanceFit,
                config: EstimationConfig = EstimationConfig()) -> SubgroupEstimate:
    """Subgroup means of the augmented inverse-propensity transform."""
    groups.check_positivity(sample.t, (arm,))
    p, e = nuisance.p(arm), nuisance.e(arm)
    a = (sample.t == arm).astype(float)
    point = _subgroup_mean(groups, a / e * (sample.y - p) + p)
    eif = eif_risk(sample, groups, arm, p, e, point)
    return _finish("dr", arm, eif, config)


def estimate_glm(sample, groups, arm, nuisance: NuisanceFit,
                 config: EstimationConfig = EstimationConfig()) -> SubgroupEstimate:
    """Subgroup means of the initial outcome regression (plug-in).

    The variance treats the regression as fixed: ``var_A(p) / |A_j|``.
    """
    p = nuisance.p(arm)
    point = _subgroup_mean(groups, p)
    m = groups.masks.astype(float)
    values = m / m.mean(axis=0) * (p[:, None] - point[None, :])
    eif = EifMatrix(values, f"risk{arm}", point, groups.labels)
    notes = {"variance": "model-based, ignores nuisance estimation"}
    try:
        return _finish("glm", arm, eif, config, notes)
    except ValidationError:
        # a constant regression has zero model-based variance: report zero-width intervals
        sigma = values.T @ values / values.shape[0]
        flat = np.array([np.ptp(p[m[:, j] > 0]) == 0 for j in range(m.shape[1])])
        sigma[flat, :] = 0.0
        sigma[:, flat] = 0.0
        iv = build_intervals(point, sigma, values.shape[0], config.alpha)
        notes["degenerate_variance"] = True
        return SubgroupEstimate("glm", arm, point, sigma, iv, eif, notes)


def estimate_ipw(sample, groups, arm, nuisance: NuisanceFit,
                 config: EstimationConfig = EstimationConfig()) -> SubgroupEstimate:
    """Horvitz-Thompson subgroup means of ``1{T=t} Y / e_t``."""
    a = (sample.t == arm).astype(float)
    w = a * sample.y / nuisance.e(arm)
    point = _subgroup_mean(groups, w)
    m = groups.masks.astype(float)
    values = m / m.mean(axis=0) * (w[:, None] - point[None, :])
    eif = EifMatrix(values, f"risk{arm}", point, groups.labels)
    return _finish("ipw", arm, eif, config)


def estimate_itmle(sample, groups, arm, nuisance: NuisanceFit,
                   config: EstimationConfig = EstimationConfig()) -> SubgroupEstimate:
    alpha, fit = itmle(sample, groups, arm, nuisance, config)
    eif = eif_risk(sample, groups, arm, fit.p_updated, nuisance.e(arm), alpha)
    notes = {"iterations": fit.iterations_used, "score_norm": fit.score_norm,
             "converged": fit.converged}
    return _finish("itmle", arm, eif, config, notes)


def estimate_tmle_multiple(sample, groups, arm, nuisance: NuisanceFit,
                           config: EstimationConfig = EstimationConfig()) -> SubgroupEstimate:
    """Multi-coefficient one-step TMLE; column ``j`` uses group ``j``'s own update."""
    alpha, fit = onestep_multi(sample, groups, arm, nuisance)
    H = clever_matrix(sample, groups, arm, nuisance, observed=False)
    eps = fit.gamma_path[0]
    off = logit(np.clip(nuisance.p(arm), 1e-6, 1 - 1e-6))
    m = groups.masks.astype(float)
    a = (sample.t == arm).astype(float)
    e = nuisance.e(arm)
    values = np.empty_like(m)
    for j in range(groups.d):
        pj = expit(off + eps[j] * H[:, j])
        values[:, j] = m[:, j] / m[:, j].mean() * ((sample.y - pj) * a / e + pj - alpha[j])
    eif = EifMatrix(values, f"risk{arm}", alpha, groups.labels)
    return _finish("tmle-multiple", arm, eif, config, {"score_norm": fit.score_norm})


def estimate_tmle_single(sample, groups, arm, spec: LearnerSpec = LearnerSpec(),
                         config: EstimationConfig = EstimationConfig(), *,
                         propensity_spec=None, outcome_spec=None) -> SubgroupEstimate:
    """Classical one-step TMLE run separately in each subgroup.

    Nuisance models are refitted on the members of each subgroup. Subgroup
    proportions stay full-sample mask means. ``seconds`` holds the wall
    time of the whole loop.
    """
    start = time.perf_counter()
    groups.check_positivity(sample.t, (arm,))
    m = groups.masks
    n, d = m.shape
    props = m.mean(axis=0)
    point = np.empty(d)
    values = np.zeros((n, d))
    scores = np.empty(d)
    a = (sample.t == arm).astype(float)
    for j in range(d):
        rows = np.flatnonzero(m[:, j])
        sub = sample.subset(rows)
        full = SubgroupFamily(np.ones((len(rows), 1), bool), (groups.labels[j],))
        try:
            nu = fit_nuisance(sub, full, spec, config.propensity_floor,
                              propensity_spec=propensity_spec, outcome_spec=outcome_spec)
            alpha, fit = classical_single_tmle(sub, full, 0, arm, nu)
        except SubtargetError as exc:
            raise type(exc)(f"subgroup {groups.labels[j]!r}: {exc}") from exc
        point[j] = alpha
        scores[j] = fit.score_norm
        p, e = fit.p_updated, nu.e(arm)
        values[rows, j] = ((sub.y - p) * a[rows] / e + p - alpha) / props[j]
    seconds = time.perf_counter() - start
    eif = EifMatrix(values, f"risk{arm}", point, groups.labels)
    return _finish("tmle-single", arm, eif, config,
                   {"max_score": float(scores.max()), "refit": "within subgroup"}, seconds)


ESTIMATORS = {
    "itmle": estimate_itmle,
    "tmle-multiple": estimate_tmle_multiple,
    "tmle-single": estimate_tmle_single,
    "dr": estimate_dr,
    "glm": estimate_glm,
    "ipw": estimate_ipw,
}


def check_estimators(names) -> list:
    names = list(names)
    bad = [x for x in names if x not in ESTIMATORS]
    if bad:
        raise ValidationError(f"unknown estimator(s) {', '.join(bad)}; valid names: "
                              + ", ".join(ESTIMATORS))
    return names
