"""Nuisance estimation: propensity score and arm-specific outcome regressions.

Learners are deliberately small. ``logistic`` is a main-terms logistic
regression fitted by Newton/IRLS with an optional ridge penalty;
``constant`` is its intercept-only special case (the sample mean), used as
the deliberately misspecified learner in the simulation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit, log_expit

from .data import ObservedSample, SubgroupFamily
from .errors import ConvergenceError, NumericalError, SeparationError, ValidationError

OUTCOME_CLIP = 1e-6


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "logistic"
    regularization: float = 0.0
    max_irls_iterations: int = 100
    irls_tolerance: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("logistic", "constant"):
            raise ValidationError(f"unsupported learner {self.kind!r}; choose logistic or constant")
        if self.regularization < 0:
            raise ValidationError("regularization must be nonnegative")

    @property
    def tag(self) -> str:
        if self.kind == "logistic" and self.regularization:
            return f"logistic(ridge={self.regularization:g})"
        return self.kind

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    intercept: float
    coef: np.ndarray
    iterations: int
    score_norm: float

    def predict(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if self.coef.size == 0:
            return np.full(features.shape[0], expit(self.intercept))
        return expit(self.intercept + features @ self.coef)


def _penalized_loglik(eta, y, beta, lam):
    # mean log-likelihood minus ridge on the slopes
    ll = np.mean(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    return ll - 0.5 * lam * float(beta[1:] @ beta[1:])


def fit_logistic(features, targets, spec: LearnerSpec = LearnerSpec()) -> LogisticFit:
    """Maximum likelihood logistic regression by damped Newton (IRLS).

    The intercept is never penalised. Convergence means the largest
    component of the mean penalised score is at most ``spec.irls_tolerance``.

    Raises
    ------
    SeparationError
        The likelihood has no finite maximiser; add regularization.
    ConvergenceError
        The iteration budget ran out before the score tolerance was met.
    """
    y = np.asarray(targets, dtype=float).ravel()
    n = y.shape[0]
    if spec.kind == "constant":
        features = np.zeros((n, 0))
    X = np.asarray(features, dtype=float).reshape(n, -1)
    p = X.shape[1]
    lam = spec.regularization
    if n < p + 1 and lam == 0:
        raise ValidationError(f"{n} rows cannot identify {p + 1} coefficients without regularization")
    if lam == 0 and (y.min() == y.max()):
        raise SeparationError(
            f"all targets equal {y[0]:g}: maximum likelihood is at infinity; "
            "use regularization > 0 or a different learner",
            direction=1 if y[0] == 1 else -1,
        )

    Z = np.column_stack([np.ones(n), X])
    penalty = np.full(p + 1, lam)
    penalty[0] = 0.0
    beta = np.zeros(p + 1)
    ybar = y.mean()
    if 0 < ybar < 1:
        beta[0] = np.log(ybar / (1 - ybar))

    eta = Z @ beta
    ll = _penalized_loglik(eta, y, beta, lam)
    score = np.inf
    for it in range(1, spec.max_irls_iterations + 1):
        mu = expit(eta)
        grad = Z.T @ (y - mu) / n - penalty * beta
        score = np.max(np.abs(grad))
        if score <= spec.irls_tolerance:
            if lam == 0 and np.max(np.abs(eta)) > 25 and np.all((eta > 0) == (y == 1)):
                # the score vanishes along a diverging ray: complete separation
                raise SeparationError(
                    "every unit is classified correctly with diverging coefficients "
                    "(complete separation); use regularization > 0")
            return LogisticFit(float(beta[0]), beta[1:].copy(), it - 1, float(score))
        w = mu * (1 - mu)
        hess = (Z * w[:, None]).T @ Z / n + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            eta_c = Z @ cand
            ll_c = _penalized_loglik(eta_c, y, cand, lam)
            if ll_c >= ll - 1e-15:
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        if not np.all(np.isfinite(beta)):
            break

    if lam == 0 and np.max(np.abs(eta)) > 25:
        raise SeparationError(
            "coefficients diverge (perfect or quasi separation); use regularization > 0",
        )
    raise ConvergenceError(
        f"logistic fit did not converge in {spec.max_irls_iterations} iterations "
        f"(final score norm {score:.3g})",
        last=beta,
    )


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Per-unit nuisance predictions.

    ``e1`` is the truncated propensity P(T=1|X); ``p1``/``p0`` are the arm
    outcome regressions evaluated at every unit, clipped away from 0 and 1;
    ``group_props`` are the subgroup mask means.
    """

    e1: np.ndarray
    p1: np.ndarray
    p0: np.ndarray
    group_props: np.ndarray
    learner_tag: str
    e1_raw: np.ndarray | None = None

    def e(self, arm: int) -> np.ndarray:
        return self.e1 if arm == 1 else 1.0 - self.e1

    def p(self, arm: int) -> np.ndarray:
        return self.p1 if arm == 1 else self.p0

    def subset(self, rows, groups: SubgroupFamily | None = None) -> "NuisanceFit":
        """Restrict to ``rows``; subgroup proportions are recomputed from ``groups``."""
        rows = np.asarray(rows)
        props = self.group_props if groups is None else group_proportions(groups)
        return NuisanceFit(self.e1[rows], self.p1[rows], self.p0[rows], props,
                           self.learner_tag,
                           None if self.e1_raw is None else self.e1_raw[rows])


def group_proportions(groups: SubgroupFamily) -> np.ndarray:
    return groups.masks.mean(axis=0)


def truncate(e, floor: float) -> np.ndarray:
    return np.clip(e, floor, 1.0 - floor)


def _fit_predict(x_train, y_train, x_all, spec, what):
    try:
        return fit_logistic(x_train, y_train, spec).predict(x_all)
    except (NumericalError, ValidationError) as exc:
        raise type(exc)(f"{what}: {exc}") from exc


def _fit_linear(x_train, y_train, x_all, spec):
    # continuous outcomes: least squares (ridge on slopes) or the arm mean
    if spec.kind == "constant":
        return np.full(x_all.shape[0], y_train.mean())
    Z = np.column_stack([np.ones(len(y_train)), x_train])
    pen = np.full(Z.shape[1], spec.regularization * len(y_train))
    pen[0] = 0.0
    beta = np.linalg.solve(Z.T @ Z + np.diag(pen), Z.T @ y_train)
    return beta[0] + x_all @ beta[1:]


def fit_nuisance(
    sample: ObservedSample,
    groups: SubgroupFamily,
    spec: LearnerSpec = LearnerSpec(),
    floor: float = 1e-3,
    *,
    propensity_spec: LearnerSpec | None = None,
    outcome_spec: LearnerSpec | None = None,
    train=None,
) -> NuisanceFit:
    """Fit e(x), p1(x), p0(x) and predict them for every unit.

    ``train`` optionally restricts the rows used for fitting (cross-fitting);
    predictions are always returned for all rows. ``propensity_spec`` and
    ``outcome_spec`` override ``spec`` for one nuisance each.
    """
    if not 0 < floor < 0.5:
        raise ValidationError("propensity floor must lie in (0, 0.5)")
    ps = propensity_spec or spec
    os_ = outcome_spec or spec
    rows = np.ones(sample.n, bool) if train is None else np.asarray(train, bool)
    x, t, y = sample.x, sample.t, sample.y
    tr = rows
    if t[tr].sum() < 1 or (1 - t[tr]).sum() < 1:
        raise ValidationError("training rows must contain both treatment arms")

    e_raw = _fit_predict(x[tr], t[tr], x, ps, "propensity model")
    t1, t0 = tr & (t == 1), tr & (t == 0)
    if sample.outcome_type == "continuous":
        p1 = _fit_linear(x[t1], y[t1], x, os_)
        p0 = _fit_linear(x[t0], y[t0], x, os_)
        tag = f"propensity={ps.tag};outcome={'linear' if os_.kind == 'logistic' else 'constant'}"
    else:
        p1 = np.clip(_fit_predict(x[t1], y[t1], x, os_, "treated outcome model"),
                     OUTCOME_CLIP, 1 - OUTCOME_CLIP)
        p0 = np.clip(_fit_predict(x[t0], y[t0], x, os_, "control outcome model"),
                     OUTCOME_CLIP, 1 - OUTCOME_CLIP)
        tag = f"propensity={ps.tag};outcome={os_.tag}"
    return NuisanceFit(
        e1=truncate(e_raw, floor),
        p1=p1,
        p0=p0,
        group_props=group_proportions(groups),
        learner_tag=tag,
        e1_raw=e_raw,
    )
