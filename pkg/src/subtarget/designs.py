"""Simulation designs, subgroup families and Monte Carlo ground truth."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import ObservedSample, SubgroupFamily
from .errors import ValidationError

log = logging.getLogger(__name__)

N_COVARIATES = 5
DESIGNS = ("main", "alternative")
FAMILIES = ("full", "overlapping4", "deciles10")

_COV = 0.5 ** np.abs(np.subtract.outer(np.arange(N_COVARIATES), np.arange(N_COVARIATES)))
_COV_CHOL = np.linalg.cholesky(_COV)


def stream(*key) -> np.random.Generator:
    """Counter-based generator for the integer key ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def covariance_matrix() -> np.ndarray:
    return _COV.copy()


def canonical_design(name: str) -> str:
    aliases = {"main": "main", "alt": "alternative", "alternative": "alternative"}
    if name not in aliases:
        raise ValidationError(f"unknown design {name!r}; choose main or alt")
    return aliases[name]


def draw_covariates(n: int, rng) -> np.ndarray:
    return rng.standard_normal((n, N_COVARIATES)) @ _COV_CHOL.T


def propensity(x) -> np.ndarray:
    return expit(x[:, 0] - 0.5 * x[:, 1] + 0.25 * x[:, 2] + 0.1 * x[:, 3])


def outcome_probability(design: str, x, t, treatment_coef: float = 1.0) -> np.ndarray:
    """P(Y = 1 | T = t, X = x) under ``design``."""
    design = canonical_design(design)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    if design == "main":
        eta = 21 + treatment_coef * t + 27.4 * x[:, 0] + 13.7 * (x[:, 1] + x[:, 2] + x[:, 3])
    else:
        eta = treatment_coef * t + x[:, 0] + x[:, 1] + x[:, 2] + x[:, 3]
    return expit(eta)


def generate(design: str, n: int, seed: int, treatment_coef: float = 1.0) -> ObservedSample:
    """Draw ``n`` units from a named design with seed ``seed``."""
    if n < 2:
        raise ValidationError("n must be at least 2")
    rng = stream(seed)
    x = draw_covariates(n, rng)
    t = (rng.random(n) < propensity(x)).astype(float)
    y = (rng.random(n) < outcome_probability(design, x, t, treatment_coef)).astype(float)
    return ObservedSample(y, t, x)


def generate_main(n: int, seed: int, treatment_coef: float = 1.0) -> ObservedSample:
    return generate("main", n, seed, treatment_coef)


def generate_alternative(n: int, seed: int, treatment_coef: float = 1.0) -> ObservedSample:
    return generate("alternative", n, seed, treatment_coef)


def family_masks(family: str, x) -> tuple[np.ndarray, tuple]:
    """Membership masks of a named family evaluated at covariates ``x``.

    Thresholds are population quantiles of the standard normal margins.
    ``overlapping4``'s last group is the whole population. ``deciles10``
    splits ``x1`` into ten half-open bins ``(q_{j}, q_{j+1}]`` with
    ``q_0 = -inf`` and ``q_10 = +inf``.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if family == "full":
        return np.ones((n, 1), bool), ("all",)
    if family == "overlapping4":
        lo, hi = norm.ppf(0.1), norm.ppf(0.9)
        masks = np.column_stack([
            x[:, 0] > lo,
            (x[:, 1] > lo) & (x[:, 1] < hi),
            x[:, 2] + x[:, 3] > -2,
            np.ones(n, bool),
        ])
        return masks, ("x1>q10", "q10<x2<q90", "x3+x4>-2", "all")
    if family == "deciles10":
        cuts = norm.ppf(np.arange(11) / 10)
        masks = np.column_stack([(x[:, 0] > cuts[j]) & (x[:, 0] <= cuts[j + 1]) for j in range(10)])
        return masks, tuple(f"x1_decile{j}" for j in range(10))
    raise ValidationError(f"unknown subgroup family {family!r}; choose one of {', '.join(FAMILIES)}")


def family_for_d(d: int) -> str:
    table = {1: "full", 4: "overlapping4", 10: "deciles10"}
    if d not in table:
        raise ValidationError("d must be 1 (full sample), 4 (overlapping) or 10 (deciles)")
    return table[d]


def subgroups(family: str, sample: ObservedSample) -> SubgroupFamily:
    masks, labels = family_masks(family, sample.x)
    return SubgroupFamily(masks, labels)


# ---------------------------------------------------------------------------
# ground truth


def _cache_dir() -> Path:
    root = os.environ.get("SUBTARGET_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "subtarget"


def true_parameters(design: str, family: str, draws: int = 1_000_000, seed: int = 20240101,
                    treatment_coef: float = 1.0, cache: bool = True) -> dict:
    """Subgroup risks ``E[p_t(X) | X in A_j]`` by Monte Carlo integration.

    Integrates the known outcome probability over ``draws`` covariate draws
    (in chunks of one million), so the only error is from sampling ``X``.
    Results, with their Monte Carlo standard errors, are cached on disk.

    Returns
    -------
    dict
        ``alpha1``, ``alpha0``, ``se1``, ``se0``, ``mass`` (P(A_j)), the
        derived ``ard``, ``rr``, ``or`` and the provenance keys.
    """
    design = canonical_design(design)
    if draws < 1_000_000:
        raise ValidationError("oracle needs at least 1e6 draws")
    key = dict(design=design, family=family, draws=int(draws), seed=int(seed),
               treatment_coef=float(treatment_coef))
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    path = _cache_dir() / f"truth-{digest}.json"
    if cache and path.exists():
        with open(path) as fh:
            return _arrays(json.load(fh))

    chunk = 1_000_000
    sums = {}
    done = 0
    c = 0
    while done < draws:
        m = min(chunk, draws - done)
        x = draw_covariates(m, stream(seed, c))
        masks, labels = family_masks(family, x)
        mf = masks.astype(float)
        for arm in (1, 0):
            p = outcome_probability(design, x, arm, treatment_coef)
            s = sums.setdefault(arm, [0.0, 0.0])
            s[0] = s[0] + mf.T @ p
            s[1] = s[1] + mf.T @ (p * p)
        sums["count"] = sums.get("count", 0.0) + mf.sum(axis=0)
        done += m
        c += 1
    count = sums["count"]
    out = dict(key, labels=list(labels), mass=(count / draws).tolist())
    for arm in (1, 0):
        mean = sums[arm][0] / count
        var = np.maximum(sums[arm][1] / count - mean**2, 0.0)
        out[f"alpha{arm}"] = mean.tolist()
        # the subgroup mean is a ratio estimator; its error is driven by within-group spread
        out[f"se{arm}"] = np.sqrt(var / count).tolist()
    a1, a0 = np.array(out["alpha1"]), np.array(out["alpha0"])
    out["ard"] = (a1 - a0).tolist()
    out["rr"] = (a1 / a0).tolist()
    out["or"] = ((a1 / (1 - a1)) / (a0 / (1 - a0))).tolist()
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        with open(tmp, "w") as fh:
            json.dump(out, fh, indent=1)
        os.replace(tmp, path)
    return _arrays(out)


def _arrays(d):
    return {k: (np.array(v) if isinstance(v, list) and k != "labels" else v) for k, v in d.items()}
