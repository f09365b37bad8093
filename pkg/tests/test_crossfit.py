import numpy as np
import pytest

from conftest import design_instance
from subtarget.crossfit import (FoldPlan, cv_effects, cv_itmle, fold_nuisance, plan_folds,
                                write_folds_csv)
from subtarget.data import EstimationConfig, ObservedSample, SubgroupFamily
from subtarget.designs import generate, subgroups
from subtarget.errors import ValidationError
from subtarget.nuisance import LearnerSpec, fit_nuisance
from subtarget.targeting import itmle

FAST = EstimationConfig(mc_draws=5000)


def tiny(n):
    t = np.tile([0.0, 1.0], n // 2)
    y = np.tile([0.0, 0.0, 1.0, 1.0], n)[:n]
    return ObservedSample(y, t, np.arange(n, dtype=float)[:, None])


def test_balanced_sizes():
    s = tiny(10)
    full = SubgroupFamily(np.ones((10, 1), bool))
    assert sorted(plan_folds(s, full, 2, 0).sizes()) == [5, 5]
    assert sorted(plan_folds(s, full, 3, 0).sizes()) == [3, 3, 4]


def test_rare_subgroup_cannot_be_split():
    s = tiny(10)
    rare = np.zeros((10, 1), bool)
    rare[3] = True
    with pytest.raises(ValidationError, match="could not place"):
        plan_folds(s, SubgroupFamily(rare), 2, 0)


def test_plan_is_seeded(tmp_path):
    s, g, _ = design_instance(n=300, d=4, seed=1)
    a, b = plan_folds(s, g, 3, 5), plan_folds(s, g, 3, 5)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert not np.array_equal(a.assignments, plan_folds(s, g, 3, 6).assignments)
    write_folds_csv(a, tmp_path / "folds.csv")
    lines = (tmp_path / "folds.csv").read_text().splitlines()
    assert lines[0] == "row,fold" and len(lines) == 301


def test_validation_rows_never_train_their_own_nuisance():
    s, g, _ = design_instance(n=600, d=4, seed=2)
    plan = plan_folds(s, g, 3, 0)
    for v in range(1, 4):
        rows, _, _, nu = fold_nuisance(s, g, v, plan, LearnerSpec(), FAST)
        held = plan.assignments == v
        # scramble the validation fold's outcomes and treatments: its nuisances must not move
        rng = np.random.default_rng(v)
        y = s.y.copy()
        t = s.t.copy()
        y[held] = rng.permutation(y[held])
        t[held] = 1 - t[held]
        other = ObservedSample(y, t, s.x)
        _, _, _, nu2 = fold_nuisance(other, g, v, plan, LearnerSpec(), FAST)
        np.testing.assert_array_equal(nu.e1, nu2.e1)
        np.testing.assert_array_equal(nu.p1, nu2.p1)
        np.testing.assert_array_equal(nu.p0, nu2.p0)
        np.testing.assert_array_equal(rows, np.flatnonzero(held))


def test_identical_folds_reproduce_full_sample_estimate():
    # two folds with the same arm-by-outcome composition and a constant learner
    y = np.array([1, 0, 1, 0, 1, 1, 0, 0] * 2, dtype=float)
    t = np.array([1, 1, 0, 0, 1, 0, 1, 0] * 2, dtype=float)
    s = ObservedSample(y, t, np.zeros((16, 1)))
    g = SubgroupFamily(np.ones((16, 1), bool))
    plan = FoldPlan(np.repeat([1, 2], 8), 2, 0)
    learner = LearnerSpec("constant")
    cross = cv_itmle(s, g, 1, learner, FAST, plan)
    whole = cv_itmle(s, g, 1, learner, FAST)
    np.testing.assert_allclose(cross.alpha, whole.alpha, atol=1e-12)


def test_per_fold_scores_and_relabelling():
    s = generate("alternative", 3000, 11)
    g = subgroups("overlapping4", s)
    config = EstimationConfig(folds=3, mc_draws=5000)
    res = cv_itmle(s, g, 1, LearnerSpec(), config)
    assert res.fold_score_norms.shape == (3,)
    assert np.all(res.fold_score_norms <= 1e-6)
    moved = cv_itmle(s, g, 1, LearnerSpec(), config, res.plan.relabel([3, 1, 2]))
    np.testing.assert_array_equal(moved.alpha, res.alpha)
    np.testing.assert_array_equal(moved.intervals.sigma, res.intervals.sigma)


def test_one_fold_is_the_plain_estimator():
    s, g, _ = design_instance(n=800, d=4, seed=3)
    res = cv_itmle(s, g, 1, LearnerSpec(), FAST)
    nu = fit_nuisance(s, g, LearnerSpec(), FAST.propensity_floor)
    alpha, fit = itmle(s, g, 1, nu, FAST)
    np.testing.assert_array_equal(res.alpha, alpha)
    np.testing.assert_array_equal(res.p_pooled, fit.p_updated)
    assert res.plan is None


def test_effects_permutation_invariant():
    s = generate("alternative", 1500, 4)
    g = subgroups("overlapping4", s)
    config = EstimationConfig(folds=3, mc_draws=5000)
    a = cv_effects(s, g, LearnerSpec(), config, targets=("ard", "rr"))
    b = cv_effects(s, g, LearnerSpec(), config, a.plan.relabel([2, 3, 1]), targets=("ard", "rr"))
    np.testing.assert_array_equal(a.effects["rr"], b.effects["rr"])
    assert np.all(a.fold_score_norms <= 1e-6)


@pytest.mark.slow
def test_null_effect_risk_ratio_near_one():
    config = EstimationConfig(folds=2, mc_draws=2000)
    rr = []
    for rep in range(30):
        s = generate("alternative", 1000, 500 + rep, treatment_coef=0.0)
        g = subgroups("overlapping4", s)
        rr.append(cv_effects(s, g, LearnerSpec(), config, targets=("rr",)).effects["rr"])
    rr = np.array(rr)
    se = rr.std(axis=0, ddof=1) / np.sqrt(len(rr))
    assert np.all(np.abs(rr.mean(axis=0) - 1.0) <= 3 * se)
