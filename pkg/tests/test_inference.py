import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import constant_nuisance, design_instance, random_binary_sample
from subtarget.data import SubgroupFamily
from subtarget.errors import ValidationError
from subtarget.inference import (build_intervals, covariance, eif_effect, eif_risk, infer,
                                 simultaneous_kappa)
from subtarget.targeting import joint_target_effects


def two_pass_covariance(values):
    n, d = values.shape
    out = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            total = 0.0
            for i in range(n):
                total += values[i, a] * values[i, b]
            out[a, b] = total / n
    return out


def effect_map(target, a1, a0):
    if target == "rr":
        return a1 / a0
    if target == "or":
        return (a1 / (1 - a1)) / (a0 / (1 - a0))
    return a1 - a0


# influence functions --------------------------------------------------------

def test_non_members_contribute_zero():
    rng = np.random.default_rng(1)
    s = random_binary_sample(rng, 50)
    g = SubgroupFamily(np.column_stack([np.ones(50, bool), s.x[:, 0] > 0]))
    phi = eif_risk(s, g, 1, np.full(50, 0.4), np.full(50, 0.5), [0.4, 0.4]).values
    np.testing.assert_array_equal(phi[s.x[:, 0] <= 0, 1], 0.0)


def test_aipw_solves_influence_equation():
    rng = np.random.default_rng(2)
    s = random_binary_sample(rng, 300)
    g = SubgroupFamily(np.ones((300, 1), bool))
    nu = constant_nuisance(s, g)
    t, y = s.t, s.y
    ebar, p1 = t.mean(), y[t == 1].mean()
    aipw = np.mean(t * y / ebar + (1 - t / ebar) * p1)
    phi = eif_risk(s, g, 1, nu.p1, nu.e1, [aipw])
    assert abs(phi.column_means[0]) <= 1e-10


def test_shift_in_estimate_shifts_mean():
    s, g, nu = design_instance(n=400, d=4, seed=1)
    alpha = np.array([0.6, 0.6, 0.6, 0.6])
    base = eif_risk(s, g, 1, nu.p1, nu.e1, alpha).column_means
    moved = eif_risk(s, g, 1, nu.p1, nu.e1, alpha + 0.05).column_means
    np.testing.assert_allclose(moved - base, -0.05, atol=1e-12)


def test_risk_difference_column_is_arm_difference():
    s, g, nu = design_instance(n=500, d=4, seed=2)
    a1, a0, fit = joint_target_effects(s, g, nu)
    ard = eif_effect(s, g, fit.p1, fit.p0, nu.e1, a1, a0, "ard").values
    phi1 = eif_risk(s, g, 1, fit.p1, nu.e1, a1).values
    phi0 = eif_risk(s, g, 0, fit.p0, 1 - nu.e1, a0).values
    np.testing.assert_array_equal(ard, phi1 - phi0)


@pytest.mark.parametrize("target", ["rr", "or"])
def test_delta_method_matches_central_differences(target):
    s, g, nu = design_instance(n=300, d=4, seed=3)
    rng = np.random.default_rng(4)
    a1, a0 = rng.uniform(0.2, 0.8, 4), rng.uniform(0.2, 0.8, 4)
    eif = eif_effect(s, g, nu.p1, nu.p0, nu.e1, a1, a0, target).values
    phi1 = eif_risk(s, g, 1, nu.p1, nu.e1, a1).values
    phi0 = eif_risk(s, g, 0, nu.p0, 1 - nu.e1, a0).values
    h = 1e-5
    numeric = (effect_map(target, a1 + h * phi1, a0 + h * phi0)
               - effect_map(target, a1 - h * phi1, a0 - h * phi0)) / (2 * h)
    np.testing.assert_allclose(eif, numeric, atol=1e-6)


def test_null_risk_ratio_column_cancels():
    # mirrored arms: unit i treated with outcome y matches unit i + n/2 untreated with outcome y
    y = np.array([0, 1, 1, 0, 1, 0, 1, 1.0])
    t = np.r_[np.ones(4), np.zeros(4)]
    from subtarget.data import ObservedSample
    s = ObservedSample(np.r_[y[:4], y[:4]], t, np.zeros((8, 1)))
    g = SubgroupFamily(np.ones((8, 1), bool))
    p, half = np.full(8, 0.4), np.full(8, 0.5)
    a = eif_risk(s, g, 1, p, half, [0.4]).column_means[0] + 0.4
    rr = eif_effect(s, g, p, p, half, [a], [a], "rr")
    assert abs(rr.column_means[0]) <= 1e-15


def test_domain_errors():
    s, g, nu = design_instance(n=200, d=1, seed=0)
    with pytest.raises(ValidationError, match="RR"):
        eif_effect(s, g, nu.p1, nu.p0, nu.e1, [0.4], [0.0], "rr")
    with pytest.raises(ValidationError, match="OR"):
        eif_effect(s, g, nu.p1, nu.p0, nu.e1, [1.0], [0.3], "or")


# covariance -------------------------------------------------------------------

def test_covariance_arithmetic():
    assert covariance(np.array([[1.0], [-1.0]]))[0, 0] == 1.0


def test_duplicate_columns_perfectly_correlated():
    v = np.random.default_rng(0).normal(size=(50, 1))
    sigma = covariance(np.column_stack([v, v]))
    np.testing.assert_array_equal(sigma[0], sigma[1])
    assert sigma[0, 1] / np.sqrt(sigma[0, 0] * sigma[1, 1]) == pytest.approx(1.0, abs=1e-15)


def test_covariance_matches_two_pass():
    s, g, nu = design_instance(n=300, d=4, seed=6)
    phi = eif_risk(s, g, 1, nu.p1, nu.e1, [0.6] * 4).values
    np.testing.assert_allclose(covariance(phi), two_pass_covariance(phi), rtol=0, atol=1e-12)


def test_zero_column_rejected():
    with pytest.raises(ValidationError, match="identically zero"):
        covariance(np.column_stack([np.ones(5), np.zeros(5)]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_covariance_psd_and_symmetric(seed, d):
    v = np.random.default_rng(seed).normal(size=(30, d))
    sigma = covariance(v)
    np.testing.assert_array_equal(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma).min() >= -1e-12


# simultaneous critical value ---------------------------------------------------

def test_kappa_one_dimension():
    assert simultaneous_kappa(np.eye(1), 0.05) == pytest.approx(1.95996, abs=0.02)


def test_kappa_independent_closed_form():
    exact = norm.ppf((1 + 0.95 ** (1 / 3)) / 2)
    assert exact == pytest.approx(2.388, abs=1e-3)
    assert simultaneous_kappa(np.eye(3), 0.05) == pytest.approx(exact, abs=0.02)


def test_kappa_perfect_correlation_collapses():
    one = simultaneous_kappa(np.eye(1), 0.05)
    both = simultaneous_kappa(np.ones((2, 2)), 0.05)
    assert both == pytest.approx(one, abs=0.02)


def test_kappa_is_deterministic_and_scale_free():
    sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    a = simultaneous_kappa(sigma, 0.05, 100_000, seed=3)
    assert a == simultaneous_kappa(sigma, 0.05, 100_000, seed=3)
    assert a == simultaneous_kappa(9.0 * sigma, 0.05, 100_000, seed=3)


def test_kappa_argument_checks():
    with pytest.raises(ValidationError):
        simultaneous_kappa(np.eye(2), 0.05, draws=10)
    with pytest.raises(ValidationError):
        simultaneous_kappa(np.eye(2), 1.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.floats(-0.2, 0.9))
def test_kappa_between_pointwise_and_bonferroni(d, rho):
    sigma = np.full((d, d), rho) + (1 - rho) * np.eye(d)
    kappa = simultaneous_kappa(sigma, 0.05, 50_000)
    assert norm.ppf(0.975) - 0.03 <= kappa <= norm.ppf(1 - 0.025 / d) + 0.03


# intervals -----------------------------------------------------------------------

def test_pointwise_interval_example():
    iv = build_intervals([0.5], [[1.0]], 100, 0.05)
    assert iv.pointwise_lo[0] == pytest.approx(0.304, abs=1e-3)
    assert iv.pointwise_hi[0] == pytest.approx(0.696, abs=1e-3)
    np.testing.assert_array_equal(iv.simultaneous_lo, iv.pointwise_lo)


def test_simultaneous_interval_example():
    iv = build_intervals([1.0], [[1.0]], 100, 0.05, kappa=2.5)
    assert iv.simultaneous_lo[0] == pytest.approx(0.75)
    assert iv.simultaneous_hi[0] == pytest.approx(1.25)


def test_infer_widens_for_many_groups():
    s, g, nu = design_instance(n=500, d=4, seed=7)
    iv = infer(eif_risk(s, g, 1, nu.p1, nu.e1, [0.6] * 4), 0.05, 50_000)
    assert iv.kappa > norm.ppf(0.975)
    assert np.all(iv.simultaneous_hi - iv.simultaneous_lo > iv.pointwise_hi - iv.pointwise_lo)
    assert set(iv.to_dict()) >= {"point", "se", "kappa", "sigma"}
