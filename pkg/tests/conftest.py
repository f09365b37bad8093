import numpy as np
import pytest

from subtarget.data import ObservedSample, SubgroupFamily
from subtarget.designs import family_for_d, generate, subgroups
from subtarget.nuisance import LearnerSpec, NuisanceFit, fit_nuisance


def design_instance(design="alternative", n=500, d=4, seed=0, learner="logistic"):
    sample = generate(design, n, seed)
    groups = subgroups(family_for_d(d), sample)
    nu = fit_nuisance(sample, groups, LearnerSpec(learner))
    return sample, groups, nu


def constant_nuisance(sample, groups):
    """Arm-mean outcome regressions and the treated fraction as propensity."""
    t, y = sample.t, sample.y
    n = sample.n
    return NuisanceFit(np.full(n, t.mean()), np.full(n, y[t == 1].mean()),
                       np.full(n, y[t == 0].mean()), groups.masks.mean(axis=0), "constant")


def random_binary_sample(rng, n, p=2):
    x = rng.standard_normal((n, p))
    t = (rng.random(n) < 1 / (1 + np.exp(-0.5 * x[:, 0]))).astype(float)
    t[:2] = (0, 1)
    y = (rng.random(n) < 1 / (1 + np.exp(-(x[:, 1] + 0.5 * t)))).astype(float)
    return ObservedSample(y, t, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def alt_instance():
    return design_instance("alternative", 1000, 4, seed=3)


@pytest.fixture
def full_group():
    def make(n):
        return SubgroupFamily(np.ones((n, 1), bool), ("all",))
    return make


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
