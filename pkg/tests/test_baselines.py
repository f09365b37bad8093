import time

import numpy as np
import pytest

from conftest import constant_nuisance, design_instance, random_binary_sample
from subtarget.baselines import (ESTIMATORS, check_estimators, estimate_dr, estimate_glm,
                                 estimate_ipw, estimate_itmle, estimate_tmle_multiple,
                                 estimate_tmle_single)
from subtarget.data import EstimationConfig, SubgroupFamily
from subtarget.designs import generate, subgroups
from subtarget.errors import ValidationError
from subtarget.nuisance import LearnerSpec, NuisanceFit, fit_nuisance
from subtarget.targeting import classical_single_tmle, itmle

FAST = EstimationConfig(mc_draws=5000)


def full(n):
    return SubgroupFamily(np.ones((n, 1), bool))


def test_dr_equals_itmle_under_constant_nuisances():
    rng = np.random.default_rng(1)
    s = random_binary_sample(rng, 400)
    nu = constant_nuisance(s, full(400))
    nu = NuisanceFit(nu.e1, np.full(400, 0.35), nu.p0, nu.group_props, "test")
    dr = estimate_dr(s, full(400), 1, nu, FAST).point[0]
    assert dr == pytest.approx(itmle(s, full(400), 1, nu)[0][0], abs=1e-8)


def test_dr_with_unit_propensity():
    rng = np.random.default_rng(2)
    s = random_binary_sample(rng, 100)
    p = rng.uniform(0.2, 0.8, 100)
    nu = NuisanceFit(np.ones(100), p, p, np.ones(1), "test")
    dr = estimate_dr(s, full(100), 1, nu, FAST).point[0]
    assert dr == pytest.approx(np.mean(s.t * s.y + (1 - s.t) * p), abs=1e-14)


def test_dr_minus_glm_is_weighted_residual_mean():
    s, g, nu = design_instance(n=600, d=4, seed=4)
    dr = estimate_dr(s, g, 1, nu, FAST).point
    glm = estimate_glm(s, g, 1, nu, FAST).point
    resid = s.t / nu.e1 * (s.y - nu.p1)
    expected = (g.masks * resid[:, None]).sum(axis=0) / g.sizes()
    np.testing.assert_allclose(dr - glm, expected, atol=1e-13)


def test_glm_constant_learner_is_arm_mean():
    s, g, _ = design_instance(n=500, d=4, seed=5)
    nu = fit_nuisance(s, g, LearnerSpec("constant"))
    est = estimate_glm(s, g, 1, nu, FAST)
    np.testing.assert_allclose(est.point, s.y[s.t == 1].mean(), rtol=1e-12)
    assert est.notes.get("degenerate_variance")
    np.testing.assert_array_equal(est.intervals.se, 0.0)


def test_ipw_with_marginal_propensity():
    rng = np.random.default_rng(3)
    s = random_binary_sample(rng, 300)
    nu = constant_nuisance(s, full(300))
    est = estimate_ipw(s, full(300), 1, nu, FAST)
    assert est.point[0] == pytest.approx(s.y[s.t == 1].mean(), abs=1e-12)


def test_single_and_multiple_reduce_to_classical():
    s, g, nu = design_instance(n=700, d=1, seed=6)
    classical, _ = classical_single_tmle(s, g, 0, 1, nu)
    single = estimate_tmle_single(s, g, 1, LearnerSpec(), FAST)
    multiple = estimate_tmle_multiple(s, g, 1, nu, FAST)
    assert single.point[0] == pytest.approx(classical, abs=1e-10)
    assert multiple.point[0] == pytest.approx(classical, abs=1e-10)


def test_single_solves_each_subgroup_score():
    s, g, _ = design_instance(n=1500, d=4, seed=7)
    est = estimate_tmle_single(s, g, 1, LearnerSpec(), FAST)
    assert est.notes["max_score"] <= 1e-6
    assert est.seconds > 0


def test_per_subgroup_loop_costs_more_than_one_itmle_call():
    s = generate("alternative", 5000, 8)
    g = subgroups("deciles10", s)
    single = estimate_tmle_single(s, g, 1, LearnerSpec(), FAST)
    nu = fit_nuisance(s, g)
    start = time.perf_counter()
    itmle(s, g, 1, nu)
    joint = time.perf_counter() - start
    assert single.seconds > joint > 0


def test_every_registered_estimator_runs():
    s, g, nu = design_instance(n=600, d=4, seed=9)
    for name, fn in ESTIMATORS.items():
        est = fn(s, g, 1, nu, FAST) if name != "tmle-single" else fn(s, g, 1, LearnerSpec(), FAST)
        assert est.point.shape == (4,)
        assert np.all(est.intervals.simultaneous_lo <= est.point)


def test_unknown_estimator_lists_names():
    with pytest.raises(ValidationError, match="valid names: itmle"):
        check_estimators(["itmle", "bart"])


def test_itmle_estimate_reports_convergence():
    s, g, nu = design_instance(n=600, d=4, seed=10)
    est = estimate_itmle(s, g, 1, nu, FAST)
    assert est.notes["converged"] and est.notes["score_norm"] <= 1e-6


@pytest.mark.slow
def test_ipw_and_dr_agree_on_average_under_null():
    diffs = []
    for rep in range(60):
        s = generate("alternative", 1000, 900 + rep, treatment_coef=0.0)
        g = subgroups("overlapping4", s)
        nu = fit_nuisance(s, g)
        diffs.append(estimate_ipw(s, g, 1, nu, FAST).point - estimate_dr(s, g, 1, nu, FAST).point)
    diffs = np.array(diffs)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    assert np.all(np.abs(diffs.mean(axis=0)) <= 3 * se)
