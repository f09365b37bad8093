import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from subtarget.data import SubgroupFamily
from subtarget.designs import generate, propensity, subgroups
from subtarget.errors import SeparationError, ValidationError
from subtarget.nuisance import LearnerSpec, fit_logistic, fit_nuisance


def coordinate_bisection_mle(X, y, sweeps=2000, tol=1e-13):
    """Cyclic coordinate ascent, each coordinate solved by bisection on its score."""
    Z = np.column_stack([np.ones(len(y)), X])
    beta = np.zeros(Z.shape[1])
    for _ in range(sweeps):
        old = beta.copy()
        for k in range(Z.shape[1]):
            def score(b):
                trial = beta.copy()
                trial[k] = b
                return Z[:, k] @ (y - expit(Z @ trial))
            lo, hi = beta[k] - 20.0, beta[k] + 20.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if score(mid) > 0:
                    lo = mid
                else:
                    hi = mid
            beta[k] = 0.5 * (lo + hi)
        if np.max(np.abs(beta - old)) < tol:
            break
    return beta


def test_matches_bisection_oracle():
    rng = np.random.default_rng(2024)
    X = rng.standard_normal((50, 2))
    y = (rng.random(50) < expit(0.3 + X @ [0.8, -0.5])).astype(float)
    fit = fit_logistic(X, y)
    oracle = coordinate_bisection_mle(X, y)
    np.testing.assert_allclose(np.r_[fit.intercept, fit.coef], oracle, atol=1e-6)


def test_all_equal_targets_separate():
    with pytest.raises(SeparationError):
        fit_logistic(np.zeros((5, 1)), np.ones(5))


def test_perfect_separation_detected():
    x = np.linspace(-1, 1, 20)[:, None]
    with pytest.raises(SeparationError):
        fit_logistic(x, (x[:, 0] > 0).astype(float))


def test_ridge_resolves_separation():
    x = np.linspace(-1, 1, 20)[:, None]
    fit = fit_logistic(x, (x[:, 0] > 0).astype(float), LearnerSpec(regularization=0.1))
    assert np.isfinite(fit.coef).all() and fit.coef[0] > 0


def test_intercept_only_is_sample_mean():
    y = np.array([1, 0, 0, 0] * 5, dtype=float)
    fit = fit_logistic(np.ones((20, 0)), y)
    assert fit.intercept == pytest.approx(logit(0.25), abs=1e-10)
    assert fit.intercept == pytest.approx(-1.0986, abs=1e-4)
    np.testing.assert_allclose(fit.predict(np.ones((3, 0))), 0.25)


def test_constant_learner_definition(rng):
    n = 40
    x = rng.standard_normal((n, 2))
    t = np.r_[np.zeros(20), np.ones(20)]
    y = (rng.random(n) < 0.4).astype(float)
    y[:2] = (0, 1)
    y[20:22] = (0, 1)
    from subtarget.data import ObservedSample
    s = ObservedSample(y, t, x)
    nu = fit_nuisance(s, SubgroupFamily(np.ones((n, 1), bool)), LearnerSpec("constant"))
    np.testing.assert_allclose(nu.e1, 0.5)
    np.testing.assert_allclose(nu.p1, y[t == 1].mean())
    np.testing.assert_allclose(nu.p0, y[t == 0].mean())


def test_propensity_floor_applied():
    from subtarget.data import ObservedSample
    t = np.zeros(100)
    t[:5] = 1
    x = np.r_[np.full(5, 3.0), np.linspace(-3, 0, 95)][:, None]
    y = np.tile([0.0, 1.0], 50)
    s = ObservedSample(y, t, x)
    nu = fit_nuisance(s, SubgroupFamily(np.ones((100, 1), bool)), LearnerSpec(regularization=1e-3),
                      floor=0.05)
    assert nu.e1_raw.min() < 0.05
    assert nu.e1.min() == 0.05
    np.testing.assert_array_equal(nu.e1, np.clip(nu.e1_raw, 0.05, 0.95))


def test_propensity_recovers_generating_model():
    s = generate("main", 5000, 17)
    nu = fit_nuisance(s, subgroups("full", s))
    assert np.mean(np.abs(nu.e1 - propensity(s.x))) < 0.03


def test_training_rows_only():
    s = generate("alternative", 400, 1)
    fam = subgroups("full", s)
    train = np.arange(s.n) < 200
    a = fit_nuisance(s, fam, train=train)
    b = fit_nuisance(s.subset(np.flatnonzero(train)), subgroups("full", s.subset(np.flatnonzero(train))))
    np.testing.assert_allclose(a.e1[train], b.e1, rtol=1e-10)
    np.testing.assert_allclose(a.p1[train], b.p1, rtol=1e-10)


def test_bad_floor_and_learner():
    s = generate("alternative", 50, 1)
    with pytest.raises(ValidationError):
        fit_nuisance(s, subgroups("full", s), floor=0.6)
    with pytest.raises(ValidationError):
        LearnerSpec("forest")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_zero_at_fit(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((80, 3))
    y = (rng.random(80) < expit(X @ [0.5, -0.3, 0.2])).astype(float)
    y[:2] = (0, 1)
    lam = 0.05
    fit = fit_logistic(X, y, LearnerSpec(regularization=lam))
    eta = fit.intercept + X @ fit.coef
    Z = np.column_stack([np.ones(80), X])
    grad = Z.T @ (y - expit(eta)) / 80 - lam * np.r_[0.0, fit.coef]
    assert np.max(np.abs(grad)) <= 1e-8
