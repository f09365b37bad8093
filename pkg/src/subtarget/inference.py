"""Influence functions, covariance and simultaneous confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import ObservedSample, SubgroupFamily
from .errors import NumericalError, ValidationError

TARGETS = ("risk1", "risk0", "ard", "rr", "or")
KAPPA_CHUNK = 50_000


@dataclass(frozen=True, eq=False)
class EifMatrix:
    """Per-unit influence function values, one column per subgroup."""

    values: np.ndarray
    target: str
    centered_at: np.ndarray
    labels: tuple = ()

    @property
    def column_means(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass(frozen=True, eq=False)
class IntervalSet:
    point: np.ndarray
    se: np.ndarray
    pointwise_lo: np.ndarray
    pointwise_hi: np.ndarray
    simultaneous_lo: np.ndarray
    simultaneous_hi: np.ndarray
    kappa: float
    sigma: np.ndarray
    level: float

    def to_dict(self) -> dict:
        out = {k: np.asarray(getattr(self, k)).tolist()
               for k in ("point", "se", "pointwise_lo", "pointwise_hi",
                         "simultaneous_lo", "simultaneous_hi", "sigma")}
        out["kappa"] = float(self.kappa)
        out["level"] = float(self.level)
        return out


def eif_risk(sample: ObservedSample, groups: SubgroupFamily, arm: int, p, e, alpha,
             label: str | None = None) -> EifMatrix:
    """Influence function of the subgroup risks of ``arm``.

    Parameters
    ----------
    p : array of shape (n,)
        Outcome regression for ``arm`` at every unit (initial or targeted).
    e : array of shape (n,)
        Propensity of receiving ``arm``.
    alpha : array of shape (d,)
        Point estimates at which the influence function is centred.
    """
    p = np.asarray(p, dtype=float)
    e = np.asarray(e, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    m = groups.masks.astype(float)
    props = m.mean(axis=0)
    a = (sample.t == arm).astype(float)
    core = (sample.y - p) * a / e + p
    values = m / props * (core[:, None] - alpha[None, :])
    return EifMatrix(values, label or f"risk{arm}", alpha, groups.labels)


def effect_jacobian(alpha1, alpha0, target: str):
    """Partial derivatives of an effect map with respect to the two arm risks."""
    a1 = np.asarray(alpha1, dtype=float)
    a0 = np.asarray(alpha0, dtype=float)
    if target == "ard":
        return np.ones_like(a1), -np.ones_like(a0)
    if target == "rr":
        return 1.0 / a0, -a1 / a0**2
    if target == "or":
        return (1 - a0) / (a0 * (1 - a1) ** 2), -a1 / (a0**2 * (1 - a1))
    raise ValidationError(f"unknown effect target {target!r}")


def _check_domain(a1, a0, target, labels):
    if target == "rr":
        bad = np.flatnonzero(~(a0 > 0))
    elif target == "or":
        bad = np.flatnonzero(~((a0 > 0) & (a0 < 1) & (a1 > 0) & (a1 < 1)))
    else:
        return
    if bad.size:
        j = bad[0]
        raise ValidationError(
            f"{target.upper()} influence function undefined for subgroup {labels[j]!r} "
            f"(risks {a1[j]:g}, {a0[j]:g})")


def eif_effect(sample, groups, p1, p0, e1, alpha1, alpha0, target: str) -> EifMatrix:
    """Delta-method influence function of ARD, RR or OR per subgroup."""
    a1 = np.asarray(alpha1, dtype=float)
    a0 = np.asarray(alpha0, dtype=float)
    _check_domain(a1, a0, target, groups.labels)
    phi1 = eif_risk(sample, groups, 1, p1, e1, a1).values
    phi0 = eif_risk(sample, groups, 0, p0, 1.0 - np.asarray(e1), a0).values
    if target == "ard":
        values = phi1 - phi0
        point = a1 - a0
    else:
        w1, w0 = effect_jacobian(a1, a0, target)
        values = phi1 * w1[None, :] + phi0 * w0[None, :]
        point = a1 / a0 if target == "rr" else (a1 / (1 - a1)) / (a0 / (1 - a0))
    return EifMatrix(values, target, point, groups.labels)


def covariance(eif: EifMatrix | np.ndarray) -> np.ndarray:
    """Uncentred second moment ``n^-1 sum_i phi_i phi_i^T``."""
    values = eif.values if isinstance(eif, EifMatrix) else np.asarray(eif, dtype=float)
    values = values.reshape(values.shape[0], -1)
    n = values.shape[0]
    if n < 2:
        raise ValidationError("covariance needs at least two units")
    sigma = values.T @ values / n
    sigma = 0.5 * (sigma + sigma.T)
    # round-off level second moments count as zero
    floor = (64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(values))))) ** 2
    zero = np.flatnonzero(np.diag(sigma) <= floor)
    if zero.size:
        labels = eif.labels if isinstance(eif, EifMatrix) and eif.labels else None
        name = labels[zero[0]] if labels else f"#{zero[0] + 1}"
        raise ValidationError(f"influence function of subgroup {name} is identically zero "
                              "(degenerate subgroup); variance undefined")
    return sigma


def _correlation_factor(sigma):
    sd = np.sqrt(np.diag(sigma))
    corr = sigma / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    jitter = 0.0
    for jitter in (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return np.linalg.cholesky(corr + jitter * np.eye(len(corr)))
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("correlation matrix is not positive definite even with 1e-6 jitter; "
                         "check for near-duplicate subgroups")


def simultaneous_kappa(sigma, q: float = 0.05, draws: int = 200_000, seed: int = 0) -> float:
    """Monte Carlo ``1 - q`` quantile of ``max_j |Z_j|``, Z ~ N(0, corr(sigma)).

    Draws come in fixed chunks of ``KAPPA_CHUNK``; chunk ``c`` uses its own
    Philox stream keyed by ``(seed, c)``, so the value does not depend on how
    chunks are scheduled.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if np.any(np.diag(sigma) <= 0):
        raise ValidationError("sigma must have a strictly positive diagonal")
    if draws < 1000:
        raise ValidationError("kappa needs at least 1000 draws")
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    L = _correlation_factor(sigma)
    d = L.shape[0]
    maxima = np.empty(draws)
    for c, start in enumerate(range(0, draws, KAPPA_CHUNK)):
        m = min(KAPPA_CHUNK, draws - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), c])))
        z = rng.standard_normal((m, d)) @ L.T
        maxima[start:start + m] = np.max(np.abs(z), axis=1)
    return float(np.quantile(maxima, 1 - q, method="linear"))


def build_intervals(point, sigma, n: int, q: float = 0.05, kappa: float | None = None) -> IntervalSet:
    """Pointwise and simultaneous Wald intervals from a covariance estimate."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    z = float(norm.ppf(1 - q / 2))
    if kappa is None:
        kappa = z
    if not kappa > 0:
        raise ValidationError("kappa must be positive")
    se = np.sqrt(np.diag(sigma) / n)
    return IntervalSet(point, se, point - z * se, point + z * se,
                       point - kappa * se, point + kappa * se, float(kappa), sigma, q)


def infer(eif: EifMatrix, q: float = 0.05, draws: int = 200_000, seed: int = 0,
          point=None) -> IntervalSet:
    """Covariance, critical value and intervals for an influence function matrix."""
    sigma = covariance(eif)
    kappa = simultaneous_kappa(sigma, q, draws, seed)
    pt = eif.centered_at if point is None else point
    return build_intervals(pt, sigma, eif.values.shape[0], q, kappa)
