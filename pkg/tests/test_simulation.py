import json

import numpy as np
import pytest

from subtarget.data import EstimationConfig
from subtarget.designs import true_parameters
from subtarget.errors import ValidationError
from subtarget.inference import build_intervals
from subtarget.simulation import (DesignSpec, format_table, replication_seed, run_monte_carlo,
                                  write_report)

FAST = EstimationConfig(mc_draws=2000)
SPEC = DesignSpec("alt", "overlapping4")


def truth_alpha():
    return true_parameters("alternative", "overlapping4", draws=SPEC.oracle_draws)["alpha1"]


def oracle(sample, groups, arm, config):
    return build_intervals(truth_alpha(), np.eye(groups.d), sample.n, config.alpha)


def coin(sample, groups, arm, config):
    # misses every subgroup on roughly half of the replications, decided by the data
    shift = 1.0 if int(sample.y.sum()) % 2 else 0.0
    return build_intervals(truth_alpha() + shift, np.eye(groups.d), sample.n, config.alpha)


def broken(sample, groups, arm, config):
    raise ValidationError("always fails")


def test_truth_returning_estimator():
    rep = run_monte_carlo(SPEC, [oracle], 5, 300, FAST)
    m = rep.metric("oracle", 300)
    assert m["scaled_bias"] == 0.0
    assert m["fwer"] == 0.0 <= FAST.alpha


def test_fwer_standard_error_scales_with_reps():
    small = run_monte_carlo(SPEC, [coin], 100, 100, FAST).metric("coin", 100)
    large = run_monte_carlo(SPEC, [coin], 200, 100, FAST).metric("coin", 100)
    assert 0.3 < small["fwer"] < 0.7
    ratio = large["fwer_mc_se"] / small["fwer_mc_se"]
    assert ratio == pytest.approx(1 / np.sqrt(2), rel=0.1)


def test_failures_are_counted_not_raised():
    rep = run_monte_carlo(SPEC, [broken, oracle], 3, 200, FAST)
    assert rep.metric("broken", 200)["failures"] == 3
    assert rep.metric("broken", 200)["scaled_bias"] is None
    assert len(rep.failures) == 3 and "always fails" in rep.failures[0]["error"]


def test_table_has_one_row_per_estimator_and_size():
    rep = run_monte_carlo(SPEC, ["itmle", "dr", "glm"], 2, [500, 1000, 2000], FAST, seed=1)
    assert [(m["estimator"], m["n"]) for m in rep.metrics if m["estimator"] == "dr"] == [
        ("dr", 500), ("dr", 1000), ("dr", 2000)]
    assert len(format_table(rep).splitlines()) == 2 + 9


def test_reruns_and_workers_agree():
    a = run_monte_carlo(SPEC, ["itmle", "glm"], 3, 400, FAST, seed=4)
    b = run_monte_carlo(SPEC, ["itmle", "glm"], 3, 400, FAST, seed=4)
    c = run_monte_carlo(SPEC, ["itmle", "glm"], 3, 400, FAST, seed=4, threads=2)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(c.to_dict(), sort_keys=True)


def test_report_files(tmp_path):
    rep = run_monte_carlo(SPEC, ["dr"], 2, 300, FAST)
    paths = write_report(rep, tmp_path, "manifest.json")
    doc = json.loads(paths["aggregate"].read_text())
    assert doc["schema"] == 1 and doc["manifest"] == "manifest.json"
    assert "rows" not in doc
    lines = paths["replications"].read_text().splitlines()
    assert len(lines) == 1 + 2 * 4
    assert paths["plot"].read_text().startswith("n,estimator,scaled_bias")


def test_replication_seeds_are_distinct():
    seeds = {replication_seed(0, n, r) for n in (500, 1000) for r in range(200)}
    assert len(seeds) == 400


def test_bad_arguments():
    with pytest.raises(ValidationError, match="valid names"):
        run_monte_carlo(SPEC, ["nope"], 2, 100, FAST)
    with pytest.raises(ValidationError):
        run_monte_carlo(SPEC, ["dr"], 0, 100, FAST)
    with pytest.raises(ValidationError):
        DesignSpec(misspecification="both")


def test_misspecification_uses_intercept_only_learner():
    rep = run_monte_carlo(DesignSpec(misspecification="outcome"), ["glm"], 2, 400, FAST)
    m = rep.metric("glm", 400)
    # a constant regression gives the same estimate in every subgroup
    assert np.ptp(m["mean"]) < 1e-12
