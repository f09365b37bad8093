"""Targeting: fluctuating initial outcome regressions toward subgroup risks.

The workhorse is a Newton solver for offset logistic regression,
``y ~ offset + S @ eps`` with the offset coefficient fixed at one. On top of
it sit

* the classical one-subgroup one-step TMLE,
* the multi-subgroup one-step TMLE (one fluctuation coefficient per group),
* the iterative TMLE (iTMLE), which at every step fluctuates along a single
  self-normalised covariate built from the current per-group scores,
* the joint two-arm iTMLE used for risk differences, ratios and odds ratios,
* a least-squares iTMLE for continuous outcomes, and
* the norm-constrained multi-coefficient fluctuation (the "primal" problem)
  together with a report comparing it with one iTMLE step.

Per-unit quantities are indexed over all ``n`` units. Only the arm's units
enter a fit, but every unit's counterfactual regression ``p_t(X_i)`` is
moved by the update, since the plug-in average runs over all subgroup
members.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, log_expit, logit

from .data import EstimationConfig, ObservedSample, SubgroupFamily
from .errors import ConvergenceError, NumericalError, SeparationError, SingularHessianError, ValidationError
from .nuisance import OUTCOME_CLIP, NuisanceFit

log = logging.getLogger(__name__)


class NonConvergenceWarning(UserWarning):
    """iTMLE hit its iteration cap before the score tolerance."""


# ---------------------------------------------------------------------------
# offset logistic regression


def _loglik(eta, y):
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def fluctuation_hessian(offset, S, eps):
    """Negative Hessian of the offset-logistic log-likelihood at ``eps``."""
    S = np.asarray(S, dtype=float).reshape(len(offset), -1)
    mu = expit(offset + S @ np.asarray(eps, dtype=float).reshape(-1))
    return (S * (mu * (1 - mu))[:, None]).T @ S


def _check_rank(S, labels=None):
    k = S.shape[1]
    if k == 1:
        return
    # greedy: a column is dependent if it adds no rank to those before it
    scale = np.linalg.norm(S, axis=0)
    Sn = S / np.where(scale > 0, scale, 1.0)
    tol = 1e-10 * max(S.shape)
    kept, dependent = [], []
    for j in range(k):
        cand = kept + [j]
        sv = np.linalg.svd(Sn[:, cand], compute_uv=False)
        if sv[-1] <= tol * sv[0]:
            dependent.append(j)
        else:
            kept.append(j)
    if dependent:
        names = [labels[j] if labels else str(j) for j in dependent]
        raise SingularHessianError(
            "clever covariates are linearly dependent; subgroup(s) "
            + ", ".join(repr(s) for s in names)
            + " are spanned by earlier subgroups (duplicated or nested-complement masks?)",
            dependent=dependent,
        )


def _newton(offset, S, y, ridge=0.0, start=None, max_iter=200, labels=None):
    """Maximise the offset-logistic log-likelihood minus ``ridge/2 * |eps|^2``."""
    m, k = S.shape
    if ridge == 0:
        _check_rank(S, labels)
    eps = np.zeros(k) if start is None else np.array(start, dtype=float)

    def objective(e):
        return _loglik(offset + S @ e, y) - 0.5 * ridge * float(e @ e)

    cur = objective(eps)
    for _ in range(max_iter):
        mu = expit(offset + S @ eps)
        grad = S.T @ (y - mu) - ridge * eps
        hess = (S * (mu * (1 - mu))[:, None]).T @ S + ridge * np.eye(k)
        if np.max(np.abs(grad)) <= 1e-13 * max(m, 1):
            return eps
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise SingularHessianError("singular fluctuation Hessian") from None
        t = 1.0
        for _ in range(50):
            cand = eps + t * step
            val = objective(cand)
            if val >= cur - 1e-12 * abs(cur):
                break
            t *= 0.5
        else:
            # no ascent possible along the Newton direction: at the optimum up to round-off
            return eps
        moved = np.max(np.abs(cand - eps))
        eps, cur = cand, val
        if not np.all(np.isfinite(eps)) or np.max(np.abs(eps)) > 1e8:
            raise SeparationError(
                "fluctuation coefficients diverge (separation)",
                direction=int(np.sign(eps[np.argmax(np.abs(eps))])),
            )
        if moved <= 1e-14 * (1 + np.max(np.abs(eps))):
            return eps
    raise ConvergenceError(f"offset logistic Newton did not converge in {max_iter} steps", last=eps)


def solve_offset_logistic(offset, covariate, y, active=None) -> float:
    """Coefficient of ``covariate`` in ``y ~ offset + eps * covariate``.

    Only units in ``active`` (boolean mask, default all) enter the fit.
    The score ``sum s_i (y_i - expit(o_i + eps s_i))`` is strictly
    decreasing in ``eps``; its limits decide whether a finite root exists.

    Raises
    ------
    ValidationError
        ``covariate`` is identically zero on the active set.
    SeparationError
        The score never reaches zero; ``direction`` is the sign of the
        divergence.
    """
    offset = np.asarray(offset, dtype=float)
    s = np.asarray(covariate, dtype=float)
    y = np.asarray(y, dtype=float)
    if active is not None:
        active = np.asarray(active, dtype=bool)
        offset, s, y = offset[active], s[active], y[active]
    if not np.any(s != 0):
        raise ValidationError("fluctuation covariate is identically zero on the active units")
    pos, neg = s > 0, s < 0
    score_plus = np.sum(s[pos] * (y[pos] - 1)) + np.sum(s[neg] * y[neg])
    score_minus = np.sum(s[pos] * y[pos]) + np.sum(s[neg] * (y[neg] - 1))
    score0 = float(s @ (y - expit(offset)))
    if score0 > 0 and score_plus >= 0:
        raise SeparationError("score stays positive as the coefficient grows (separation)", direction=1)
    if score0 < 0 and score_minus <= 0:
        raise SeparationError("score stays negative as the coefficient falls (separation)", direction=-1)
    return float(_newton(offset, s[:, None], y)[0])


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True, eq=False)
class TargetedFit:
    """Outcome of a targeting run for one arm.

    ``group_scores`` holds the per-subgroup empirical means of the residual
    part of the influence function at ``p_updated``; ``score_norm`` is its
    Euclidean norm.
    """

    arm: int
    p_updated: np.ndarray
    gamma_path: np.ndarray
    iterations_used: int
    score_norm: float
    converged: bool
    group_scores: np.ndarray
    method: str = "itmle"


@dataclass(frozen=True, eq=False)
class JointTargetedFit:
    p1: np.ndarray
    p0: np.ndarray
    gamma_path: np.ndarray
    iterations_used: int
    score_norms: np.ndarray
    converged: bool
    group_scores1: np.ndarray
    group_scores0: np.ndarray

    @property
    def score_norm(self) -> float:
        return float(np.max(self.score_norms))

    def arm(self, t: int) -> TargetedFit:
        k = 0 if t == 1 else 1
        return TargetedFit(
            t, self.p1 if t == 1 else self.p0, self.gamma_path[:, k], self.iterations_used,
            float(self.score_norms[k]), self.converged,
            self.group_scores1 if t == 1 else self.group_scores0, "itmle-joint",
        )


@dataclass(frozen=True, eq=False)
class CleverCovariates:
    """Clever covariates for one arm at the current outcome regression.

    ``per_group[i, j]`` is ``1{i in A_j} / P(A_j) * 1{T_i = t} / e_t(X_i)``;
    ``group_scores`` are the per-group mean scores; ``normalized`` is the
    single self-normalised covariate, ``None`` when every score is zero.
    ``update_direction`` is the same combination without the treatment
    indicator: the amount by which every unit's arm-``t`` logit moves per
    unit of fluctuation coefficient.
    """

    per_group: np.ndarray
    group_scores: np.ndarray
    normalized: np.ndarray | None
    update_direction: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.normalized is None


# ---------------------------------------------------------------------------
# building blocks


def _check_arm(sample, groups, arm):
    if arm not in (0, 1):
        raise ValidationError(f"arm must be 0 or 1, got {arm!r}")
    if groups.n != sample.n:
        raise ValidationError(f"subgroup masks cover {groups.n} units, sample has {sample.n}")
    groups.check_positivity(sample.t, (arm,))


def clever_matrix(sample: ObservedSample, groups: SubgroupFamily, arm: int,
                  nuisance: NuisanceFit, observed: bool = True) -> np.ndarray:
    """``n x d`` matrix of per-group clever covariates for ``arm``.

    With ``observed=True`` entry ``(i, j)`` carries the indicator
    ``1{T_i = arm}``: this is the regressor and the score weight. With
    ``observed=False`` the covariate is evaluated at ``T = arm`` for every
    unit, which is what moves the counterfactual regression ``p_arm(X_i)``
    of units outside the arm.
    """
    w = 1.0 / nuisance.e(arm)
    if observed:
        w = w * (sample.t == arm)
    return groups.masks / nuisance.group_props[None, :] * w[:, None]


def group_scores(H, y, p) -> np.ndarray:
    """Per-group means of ``H_ij (y_i - p_i)``."""
    return H.T @ (y - p) / H.shape[0]


def build_normalized_covariate(sample, groups, arm, nuisance, p_current) -> CleverCovariates:
    """Clever covariates and the self-normalised iTMLE direction at ``p_current``."""
    p_current = np.asarray(p_current, dtype=float)
    if sample.outcome_type == "binary" and not np.all((p_current > 0) & (p_current < 1)):
        raise ValidationError("current outcome regression must lie strictly inside (0, 1)")
    H = clever_matrix(sample, groups, arm, nuisance)
    g = group_scores(H, sample.y, p_current)
    norm = float(np.sqrt(g @ g))
    if norm == 0.0:
        return CleverCovariates(H, g, None, None)
    Hc = clever_matrix(sample, groups, arm, nuisance, observed=False)
    return CleverCovariates(H, g, H @ (g / norm), Hc @ (g / norm))


def plug_in_means(groups: SubgroupFamily, p) -> np.ndarray:
    """Average of ``p`` over all members of each subgroup."""
    m = groups.masks
    return (m * np.asarray(p)[:, None]).sum(axis=0) / m.sum(axis=0)


def _initial(nuisance, arm, binary=True):
    p = np.asarray(nuisance.p(arm), dtype=float)
    if binary:
        p = np.clip(p, OUTCOME_CLIP, 1 - OUTCOME_CLIP)
    return p


_P_LO = np.finfo(float).tiny
_P_HI = 1.0 - np.finfo(float).epsneg


def _interior(eta):
    # expit saturates to exactly 0 or 1 beyond |eta| ~ 37 (resp. 745); keep strictly inside
    if not np.all(np.isfinite(eta)):
        raise NumericalError("fluctuation produced non-finite logits")
    return np.clip(expit(eta), _P_LO, _P_HI)


def _finish_warning(method, arm, k, norm, tol):
    msg = (f"{method} (arm {arm}) stopped after {k} iterations with score norm "
           f"{norm:.3g} > tolerance {tol:.3g}")
    log.warning(msg)
    warnings.warn(msg, NonConvergenceWarning, stacklevel=3)



class _SearchDirection:
    """Direction in group-score space for the next single-covariate fluctuation.

    Every variant fluctuates along one covariate ``H @ u`` per iteration and
    all share the same fixed point, the maximiser of the likelihood over the
    span of the clever covariates. They differ only in how fast they get
    there.

    ``steepest``
        ``u`` is the current vector of group scores itself.
    ``conjugate``
        Polak-Ribiere combination with the previous direction, restarted
        every ``d`` steps or when it would not be an ascent direction.
    ``preconditioned``
        Group scores premultiplied by the pseudo-inverse of the fluctuation
        information ``H' W H / n`` on the arm's rows. Falls back to the raw
        scores if that is not an ascent direction.
    """

    def __init__(self, kind: str, H=None, rows=None):
        self.kind = kind
        self.H = None if H is None else H[rows]
        self.n = None if H is None else H.shape[0]
        self.rows = rows
        self.prev_g = self.prev_dir = None
        self.k = 0

    def __call__(self, g, p=None):
        direction = g
        if self.kind == "conjugate" and self.prev_g is not None and self.k % len(g) != 0:
            beta = max(0.0, float(g @ (g - self.prev_g)) / float(self.prev_g @ self.prev_g))
            cand = g + beta * self.prev_dir
            if float(cand @ g) > 0:
                direction = cand
        elif self.kind == "preconditioned" and len(g) > 1:
            pa = p[self.rows]
            info = (self.H * (pa * (1 - pa))[:, None]).T @ self.H / self.n
            cand = np.linalg.lstsq(info, g, rcond=1e-12)[0]
            if np.all(np.isfinite(cand)) and float(cand @ g) > 0:
                direction = cand
        self.prev_g, self.prev_dir = g, direction
        self.k += 1
        return direction / np.linalg.norm(direction)


# ---------------------------------------------------------------------------
# estimators


def classical_single_tmle(sample: ObservedSample, groups: SubgroupFamily, j: int, arm: int,
                          nuisance: NuisanceFit):
    """One-step TMLE for subgroup ``j`` alone.

    Fits one offset-logistic regression on the arm-``arm`` members of
    subgroup ``j`` and averages the updated regression over all members.

    Returns
    -------
    alpha : float
    fit : TargetedFit
    """
    sub = SubgroupFamily(groups.masks[:, [j]], (groups.labels[j],))
    nu = NuisanceFit(nuisance.e1, nuisance.p1, nuisance.p0,
                     nuisance.group_props[[j]], nuisance.learner_tag)
    _check_arm(sample, sub, arm)
    p0 = _initial(nuisance, arm)
    H = clever_matrix(sample, sub, arm, nu)[:, 0]
    Hc = clever_matrix(sample, sub, arm, nu, observed=False)[:, 0]
    active = sub.masks[:, 0] & (sample.t == arm)
    eps = solve_offset_logistic(logit(p0), H, sample.y, active)
    p = expit(logit(p0) + eps * Hc)
    g = group_scores(H[:, None], sample.y, p)
    alpha = float(plug_in_means(sub, p)[0])
    return alpha, TargetedFit(arm, p, np.array([eps]), 1, float(abs(g[0])), True, g, "tmle-single")


def onestep_multi(sample: ObservedSample, groups: SubgroupFamily, arm: int, nuisance: NuisanceFit):
    """Multi-subgroup one-step TMLE: one coefficient per subgroup, fitted jointly.

    Group ``j``'s estimate averages ``expit(logit p_init + eps_j S_j)`` over
    its members. The returned fit carries the jointly updated regression
    ``expit(logit p_init + sum_j eps_j S_j)``, at which every per-group score
    is zero (the first-order conditions of the joint fit).
    """
    _check_arm(sample, groups, arm)
    p0 = _initial(nuisance, arm)
    off = logit(p0)
    H = clever_matrix(sample, groups, arm, nuisance)
    Hc = clever_matrix(sample, groups, arm, nuisance, observed=False)
    rows = sample.t == arm
    eps = _newton(off[rows], H[rows], sample.y[rows], labels=groups.labels)
    per_group = expit(off[:, None] + Hc * eps[None, :])
    alpha = (groups.masks * per_group).sum(axis=0) / groups.sizes()
    p_joint = expit(off + Hc @ eps)
    g = group_scores(H, sample.y, p_joint)
    norm = float(np.sqrt(g @ g))
    return alpha, TargetedFit(arm, p_joint, eps[None, :], 1, norm, True, g, "tmle-multiple")


def itmle(sample: ObservedSample, groups: SubgroupFamily, arm: int, nuisance: NuisanceFit,
          config: EstimationConfig = EstimationConfig()):
    """Iterative one-step TMLE for the subgroup risks of one arm.

    Each iteration builds the self-normalised clever covariate from the
    current per-group scores, fits its single coefficient by offset logistic
    regression on the arm's units and updates the regression on the logit
    scale. Iteration stops once the norm of the per-group scores is at most
    ``config.tol``, once ``|gamma| <= config.gamma_tol`` or after
    ``config.max_iter`` updates (non-fatal: a :class:`NonConvergenceWarning`
    is issued and the last iterate returned).

    Returns
    -------
    alpha : ndarray of shape (d,)
        Mean of the targeted regression over all members of each subgroup.
    fit : TargetedFit
    """
    _check_arm(sample, groups, arm)
    H = clever_matrix(sample, groups, arm, nuisance)
    Hc = clever_matrix(sample, groups, arm, nuisance, observed=False)
    rows = sample.t == arm
    y = sample.y
    eta = logit(_initial(nuisance, arm))
    p = expit(eta)
    gammas = []
    g = group_scores(H, y, p)
    norm = float(np.sqrt(g @ g))
    search = _SearchDirection(config.search, H, rows)
    while norm > config.tol and len(gammas) < config.max_iter:
        s = Hc @ search(g, p)
        gamma = solve_offset_logistic(eta[rows], s[rows], y[rows])
        eta = eta + gamma * s
        p = _interior(eta)
        gammas.append(gamma)
        g = group_scores(H, y, p)
        norm = float(np.sqrt(g @ g))
        if abs(gamma) <= config.gamma_tol:
            break
    converged = norm <= config.tol
    if not converged:
        _finish_warning("itmle", arm, len(gammas), norm, config.tol)
    return plug_in_means(groups, p), TargetedFit(
        arm, p, np.array(gammas), len(gammas), norm, converged, g, "itmle")


def joint_target_effects(sample: ObservedSample, groups: SubgroupFamily, nuisance: NuisanceFit,
                         config: EstimationConfig = EstimationConfig()):
    """Target both arms together with a two-coefficient fluctuation.

    Each iteration fits ``y ~ logit p(T, X) + g1 * S1 + g0 * S0`` on all units,
    where ``S1`` and ``S0`` are the self-normalised covariates of each arm
    (zero off their arm). An arm whose score norm has reached ``config.tol``
    is held fixed. Stops when both arms are within tolerance or after
    ``config.max_iter`` iterations.

    Returns
    -------
    alpha1, alpha0 : ndarray of shape (d,)
    fit : JointTargetedFit
    """
    _check_arm(sample, groups, 1)
    _check_arm(sample, groups, 0)
    y, t = sample.y, sample.t
    H = {a: clever_matrix(sample, groups, a, nuisance) for a in (1, 0)}
    Hc = {a: clever_matrix(sample, groups, a, nuisance, observed=False) for a in (1, 0)}
    eta = {a: logit(_initial(nuisance, a)) for a in (1, 0)}
    p = {a: expit(eta[a]) for a in (1, 0)}
    g = {a: group_scores(H[a], y, p[a]) for a in (1, 0)}
    norm = {a: float(np.sqrt(g[a] @ g[a])) for a in (1, 0)}
    frozen = {a: norm[a] <= config.tol for a in (1, 0)}
    search = {a: _SearchDirection(config.search, H[a], t == a) for a in (1, 0)}
    path = []
    while not all(frozen.values()) and len(path) < config.max_iter:
        live = [a for a in (1, 0) if not frozen[a]]
        s = {a: Hc[a] @ search[a](g[a], p[a]) for a in live}
        offset = np.where(t == 1, eta[1], eta[0])
        # regressors carry the arm indicator; the update moves every unit
        S = np.column_stack([s[a] * (t == a) for a in live])
        coef = _newton(offset, S, y)
        step = {1: 0.0, 0: 0.0}
        for a, c in zip(live, coef):
            step[a] = float(c)
            eta[a] = eta[a] + c * s[a]
            p[a] = _interior(eta[a])
            g[a] = group_scores(H[a], y, p[a])
            norm[a] = float(np.sqrt(g[a] @ g[a]))
            if norm[a] <= config.tol or abs(c) <= config.gamma_tol:
                frozen[a] = True
        path.append((step[1], step[0]))
    norms = np.array([norm[1], norm[0]])
    converged = bool(np.all(norms <= config.tol))
    if not converged:
        _finish_warning("joint itmle", "both", len(path), float(norms.max()), config.tol)
    fit = JointTargetedFit(p[1], p[0], np.array(path).reshape(-1, 2), len(path), norms,
                           converged, g[1], g[0])
    return plug_in_means(groups, p[1]), plug_in_means(groups, p[0]), fit


def effect_measures(alpha1, alpha0, measures=("ard", "rr", "or"), labels=None) -> dict:
    """Map arm risks to risk differences, risk ratios and odds ratios."""
    a1 = np.atleast_1d(np.asarray(alpha1, dtype=float))
    a0 = np.atleast_1d(np.asarray(alpha0, dtype=float))
    labels = labels or [f"A{j + 1}" for j in range(a1.size)]
    out = {}
    for m in measures:
        if m == "ard":
            out[m] = a1 - a0
        elif m == "rr":
            bad = np.flatnonzero(~(a0 > 0))
            if bad.size:
                raise ValidationError(
                    f"risk ratio undefined for subgroup {labels[bad[0]]!r}: control risk {a0[bad[0]]:g}")
            out[m] = a1 / a0
        elif m == "or":
            bad = np.flatnonzero(~((a0 > 0) & (a0 < 1) & (a1 > 0) & (a1 < 1)))
            if bad.size:
                j = bad[0]
                raise ValidationError(
                    f"odds ratio undefined for subgroup {labels[j]!r}: risks {a1[j]:g}, {a0[j]:g}")
            out[m] = (a1 / (1 - a1)) / (a0 / (1 - a0))
        else:
            raise ValidationError(f"unknown effect measure {m!r}")
    return out


def itmle_continuous(sample: ObservedSample, groups: SubgroupFamily, arm: int,
                     nuisance: NuisanceFit, config: EstimationConfig = EstimationConfig()):
    """iTMLE with a linear (least-squares) fluctuation for real-valued outcomes."""
    _check_arm(sample, groups, arm)
    H = clever_matrix(sample, groups, arm, nuisance)
    Hc = clever_matrix(sample, groups, arm, nuisance, observed=False)
    rows = sample.t == arm
    y = sample.y
    p = np.array(nuisance.p(arm), dtype=float)
    gammas = []
    g = group_scores(H, y, p)
    norm = float(np.sqrt(g @ g))
    # the least-squares information has unit weights
    search = _SearchDirection(config.search, H, rows)
    while norm > config.tol and len(gammas) < config.max_iter:
        s = Hc @ search(g, np.full(len(p), 0.5))
        ss = float(s[rows] @ s[rows])
        if ss == 0.0:
            raise NumericalError("normalised covariate vanished while scores are nonzero")
        gamma = float(s[rows] @ (y[rows] - p[rows])) / ss
        p = p + gamma * s
        gammas.append(gamma)
        g = group_scores(H, y, p)
        norm = float(np.sqrt(g @ g))
        if abs(gamma) <= config.gamma_tol:
            break
    converged = norm <= config.tol
    if not converged:
        _finish_warning("itmle_continuous", arm, len(gammas), norm, config.tol)
    return plug_in_means(groups, p), TargetedFit(
        arm, p, np.array(gammas), len(gammas), norm, converged, g, "itmle-linear")


# ---------------------------------------------------------------------------
# norm-constrained multi-coefficient fluctuation


@dataclass(frozen=True, eq=False)
class PrimalSolution:
    """Minimiser of the mean negative log-likelihood over ``|eps| <= delta``.

    ``multiplier`` is the Lagrange multiplier of the constraint written as
    ``|eps| - delta <= 0`` (zero when the constraint is slack).
    """

    eps: np.ndarray
    multiplier: float
    kkt_residual: float
    boundary: bool


def solve_primal(sample, groups, arm, nuisance, p_current, delta, tol=1e-10) -> PrimalSolution:
    """Constrained fluctuation ``min f(eps)`` subject to ``|eps|_2 <= delta``.

    ``f`` is the mean negative offset-logistic log-likelihood over the arm's
    units with offsets ``logit(p_current)`` and the per-group clever
    covariates. If the unconstrained optimum lies inside the ball it is
    returned. Otherwise the solution is on the sphere and satisfies
    ``grad f + mu * eps = 0``; ``mu`` is found by root-finding on
    ``|eps(mu)| = delta``, where ``eps(mu)`` minimises ``f + mu/2 |eps|^2``
    by Newton's method.
    """
    if delta < 0:
        raise ValidationError("delta must be nonnegative")
    _check_arm(sample, groups, arm)
    H = clever_matrix(sample, groups, arm, nuisance)
    rows = sample.t == arm
    n = sample.n
    off = logit(np.asarray(p_current, dtype=float))[rows]
    S, y = H[rows], sample.y[rows]
    d = H.shape[1]
    if delta == 0:
        return PrimalSolution(np.zeros(d), 0.0, 0.0, True)

    def grad_f(e):
        return -S.T @ (y - expit(off + S @ e)) / n

    g0 = -grad_f(np.zeros(d))
    if not np.any(g0):
        return PrimalSolution(np.zeros(d), 0.0, 0.0, False)

    try:
        free = _newton(off, S, y, labels=groups.labels)
    except (SeparationError, ConvergenceError):
        free = None
    if free is not None and np.linalg.norm(free) <= delta:
        return PrimalSolution(free, 0.0, float(np.max(np.abs(grad_f(free)))), False)

    # mean-scale ridge mu  <->  sum-scale ridge n * mu
    cache = {}

    def eps_of(mu):
        if mu not in cache:
            start = cache[max(cache)] if cache else None
            cache[mu] = _newton(off, S, y, ridge=n * mu, start=start)
        return cache[mu]

    def gap(log_mu):
        return np.linalg.norm(eps_of(float(np.exp(log_mu)))) - delta

    hi = np.log(np.linalg.norm(g0) / delta)   # |eps(mu)| <= |g0| / mu
    lo = hi - 5.0
    while gap(lo) <= 0:
        lo -= 5.0
        if lo < hi - 200:
            raise ConvergenceError("could not bracket the constraint multiplier")
    if gap(hi) >= 0:
        hi += 1.0
    log_mu = brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    mu = float(np.exp(log_mu))
    eps = _newton(off, S, y, ridge=n * mu, start=eps_of(mu))
    # rescale onto the sphere; the root is accurate to ~1e-14 relative
    eps = eps * (delta / np.linalg.norm(eps))
    kkt = float(np.max(np.abs(grad_f(eps) + mu * eps)))
    if kkt > max(tol, 1e-8 * np.linalg.norm(g0)):
        raise ConvergenceError(f"constrained fluctuation KKT residual {kkt:.3g} above tolerance")
    return PrimalSolution(eps, mu * delta, kkt, True)


@dataclass(frozen=True, eq=False)
class DualStepReport:
    """Comparison of one constrained multi-coefficient step with one iTMLE step.

    ``primal_update`` and ``dual_update`` are the induced changes to
    ``logit p`` at every unit. ``update_cosine`` is the cosine between
    them; ``direction_cosine`` is the cosine between ``eps`` and the
    per-group mean scores before the step; ``proportionality_error`` is
    ``|eps - c g| / |eps|`` for the least-squares ``c``.
    ``stationarity_error`` is the same quantity with ``g`` replaced by the
    group scores after the primal step, where the Lagrangian's stationarity
    condition makes ``eps`` exactly proportional to them.
    """

    primal_eps: np.ndarray
    dual_gamma: float
    group_scores: np.ndarray
    primal_update: np.ndarray
    dual_update: np.ndarray
    update_cosine: float
    direction_cosine: float
    proportionality_error: float
    stationarity_error: float = 0.0


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


def _residual_share(eps, g):
    norm = np.linalg.norm(eps)
    if norm == 0 or not np.any(g):
        return 0.0
    c = float(eps @ g / (g @ g))
    return float(np.linalg.norm(eps - c * g) / norm)


def dual_step_equivalence(sample, groups, arm, nuisance, p_current, delta) -> DualStepReport:
    """Solve one primal step of radius ``delta`` and one iTMLE step; compare them."""
    cc = build_normalized_covariate(sample, groups, arm, nuisance, p_current)
    d = groups.d
    n = sample.n
    if cc.converged:
        z = np.zeros(n)
        return DualStepReport(np.zeros(d), 0.0, cc.group_scores, z, z.copy(),
                              float("nan"), float("nan"), 0.0)
    rows = sample.t == arm
    off = logit(np.asarray(p_current, dtype=float))
    gamma = solve_offset_logistic(off[rows], cc.normalized[rows], sample.y[rows])
    primal = solve_primal(sample, groups, arm, nuisance, p_current, delta)
    eps = primal.eps
    g = cc.group_scores
    Hc = clever_matrix(sample, groups, arm, nuisance, observed=False)
    primal_update = Hc @ eps
    dual_update = gamma * cc.update_direction
    H = clever_matrix(sample, groups, arm, nuisance)
    after = group_scores(H, sample.y, _interior(off + primal_update))
    return DualStepReport(eps, gamma, g, primal_update, dual_update,
                          _cos(primal_update, dual_update), _cos(eps, g),
                          _residual_share(eps, g), _residual_share(eps, after))
