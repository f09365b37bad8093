"""Observed data, subgroup families and run configuration.

Everything here is immutable once built: arrays are copied and flagged
read-only so downstream estimators can share them freely.
"""

from __future__ import annotations

import ast
import csv
import logging
import math
import operator
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import ValidationError

log = logging.getLogger(__name__)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservedSample:
    """An i.i.d. sample of (outcome, treatment, covariates).

    Parameters
    ----------
    y : array of shape (n,)
        Outcomes; 0/1 unless ``outcome_type == "continuous"``.
    t : array of shape (n,)
        Binary treatment indicators.
    x : array of shape (n, p)
        Real-valued covariates.
    x_names : sequence of str, optional
        Covariate names; defaults to ``x1..xp``.
    group_columns : mapping of str to 0/1 arrays, optional
        Pre-computed subgroup membership columns carried along with the data.
    """

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    x_names: tuple = ()
    group_columns: Mapping[str, np.ndarray] = field(default_factory=dict)
    outcome_type: str = "binary"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        t = np.asarray(self.t, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if t.shape[0] != n or x.shape[0] != n:
            raise ValidationError(
                f"length mismatch: y has {n} rows, t has {t.shape[0]}, x has {x.shape[0]}"
            )
        if n < 2:
            raise ValidationError(f"need at least 2 units, got {n}")
        if self.outcome_type not in ("binary", "continuous"):
            raise ValidationError(f"unknown outcome_type {self.outcome_type!r}")
        if not np.all(np.isfinite(y)):
            row = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ValidationError(f"non-finite outcome in row {row + 1}")
        if self.outcome_type == "binary":
            bad = np.flatnonzero((y != 0) & (y != 1))
            if bad.size:
                raise ValidationError(
                    f"outcome must be 0/1: row {bad[0] + 1} has y={y[bad[0]]:g}"
                )
        bad = np.flatnonzero((t != 0) & (t != 1))
        if bad.size:
            raise ValidationError(
                f"treatment must be 0/1: row {bad[0] + 1} has t={t[bad[0]]:g}"
            )
        if not np.all(np.isfinite(x)):
            r, c = np.argwhere(~np.isfinite(x))[0]
            raise ValidationError(f"non-finite covariate in row {r + 1}, column {c + 1}")
        if t.sum() < 1:
            raise ValidationError("treatment arm empty (no rows with t=1)")
        if t.sum() > n - 1:
            raise ValidationError("control arm empty (no rows with t=0)")

        names = tuple(self.x_names) or tuple(f"x{k + 1}" for k in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError(f"{len(names)} covariate names for {x.shape[1]} columns")
        groups = {}
        for name, col in dict(self.group_columns).items():
            col = np.asarray(col, dtype=float).ravel()
            if col.shape[0] != n or np.any((col != 0) & (col != 1)):
                raise ValidationError(f"group column {name!r} must be 0/1 of length {n}")
            groups[name] = _frozen(col, bool)

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "x_names", names)
        object.__setattr__(self, "group_columns", groups)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "ObservedSample":
        """Rows ``rows`` (boolean mask or index array) as a new sample."""
        rows = np.asarray(rows)
        return ObservedSample(
            self.y[rows],
            self.t[rows],
            self.x[rows],
            self.x_names,
            {k: v[rows] for k, v in self.group_columns.items()},
            self.outcome_type,
        )

    def column(self, name: str) -> np.ndarray:
        try:
            return self.x[:, self.x_names.index(name)]
        except ValueError:
            raise ValidationError(
                f"unknown covariate {name!r}; available: {', '.join(self.x_names)}"
            ) from None


@dataclass(frozen=True, eq=False)
class SubgroupFamily:
    """``d`` possibly overlapping subgroup membership masks over ``n`` units."""

    masks: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=bool)
        if m.ndim == 1:
            m = m[:, None]
        labels = tuple(self.labels) or tuple(f"A{j + 1}" for j in range(m.shape[1]))
        if len(labels) != m.shape[1]:
            raise ValidationError(f"{len(labels)} labels for {m.shape[1]} subgroups")
        object.__setattr__(self, "masks", _frozen(m, bool))
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.masks.shape[1]

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def sizes(self) -> np.ndarray:
        return self.masks.sum(axis=0)

    def arm_counts(self, t: np.ndarray, arm: int) -> np.ndarray:
        """Members of each subgroup with treatment equal to ``arm``."""
        return (self.masks & (np.asarray(t) == arm)[:, None]).sum(axis=0)

    def subset(self, rows) -> "SubgroupFamily":
        return SubgroupFamily(self.masks[np.asarray(rows)], self.labels)

    def check_positivity(self, t: np.ndarray, arms: Iterable[int] = (0, 1)) -> None:
        """Raise if any subgroup has no member in one of ``arms``."""
        if self.masks.shape[0] != np.asarray(t).shape[0]:
            raise ValidationError(
                f"subgroup masks cover {self.masks.shape[0]} units, sample has {len(t)}"
            )
        for arm in arms:
            counts = self.arm_counts(t, arm)
            for j in np.flatnonzero(counts == 0):
                name = "treated" if arm == 1 else "control"
                raise ValidationError(
                    f"subgroup {self.labels[j]!r} has no members in the {name} arm (t={arm})"
                )


SEARCH_KINDS = ("preconditioned", "conjugate", "steepest")


@dataclass(frozen=True)
class EstimationConfig:
    """Run-level settings shared by the estimators and the harness."""

    max_iter: int = 500
    tol: float = 1e-6
    gamma_tol: float = 0.0
    propensity_floor: float = 1e-3
    alpha: float = 0.05
    mc_draws: int = 200_000
    seed: int = 0
    folds: int = 1
    search: str = "preconditioned"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.gamma_tol < 0:
            raise ValidationError("gamma_tol must be nonnegative")
        if not 0 < self.propensity_floor < 0.5:
            raise ValidationError("propensity_floor must lie in (0, 0.5)")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.mc_draws < 1:
            raise ValidationError("mc_draws must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.folds < 1:
            raise ValidationError("folds must be >= 1")
        if self.search not in SEARCH_KINDS:
            raise ValidationError(f"search must be one of {', '.join(SEARCH_KINDS)}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# CSV ingestion


def _to_float(text):
    try:
        return float(text)
    except ValueError:
        return None


def load_sample(
    path,
    y_col: str = "y",
    t_col: str = "t",
    x_cols: Sequence[str] | None = None,
    group_prefix: str = "g",
    outcome_type: str = "binary",
) -> ObservedSample:
    """Read a header-row CSV into a validated :class:`ObservedSample`.

    Covariates default to every remaining numeric column. Columns named
    ``<group_prefix><digits>`` are treated as 0/1 subgroup masks.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    for col in (y_col, t_col):
        if col not in header:
            raise ValidationError(f"missing column {col!r} in {path}")
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise ValidationError(f"row {k + 1} has {len(r)} fields, header has {len(header)}")

    group_re = re.compile(re.escape(group_prefix) + r"\d+$") if group_prefix else None
    group_names = [h for h in header if group_re and group_re.match(h) and h not in (y_col, t_col)]

    def numeric(name, required):
        j = header.index(name)
        out = np.empty(len(rows))
        for k, r in enumerate(rows):
            v = _to_float(r[j].strip())
            if v is None:
                if required:
                    raise ValidationError(f"non-numeric value {r[j]!r} in row {k + 1}, column {name!r}")
                return None
            if not math.isfinite(v):
                raise ValidationError(f"non-finite value in row {k + 1}, column {name!r}")
            out[k] = v
        return out

    y = numeric(y_col, True)
    t = numeric(t_col, True)
    if outcome_type == "binary":
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise ValidationError(f"non-binary outcome in row {bad[0] + 1}, column {y_col!r}")
    bad = np.flatnonzero((t != 0) & (t != 1))
    if bad.size:
        raise ValidationError(f"non-binary treatment in row {bad[0] + 1}, column {t_col!r}")

    if x_cols is None:
        names, cols = [], []
        for h in header:
            if h in (y_col, t_col) or h in group_names:
                continue
            c = numeric(h, False)
            if c is None:
                log.info("skipping non-numeric column %r", h)
                continue
            names.append(h)
            cols.append(c)
    else:
        names = list(x_cols)
        for h in names:
            if h not in header:
                raise ValidationError(f"missing column {h!r} in {path}")
        cols = [numeric(h, True) for h in names]
    x = np.column_stack(cols) if cols else np.zeros((len(rows), 0))

    groups = {}
    for h in group_names:
        g = numeric(h, True)
        bad = np.flatnonzero((g != 0) & (g != 1))
        if bad.size:
            raise ValidationError(f"non-binary group value in row {bad[0] + 1}, column {h!r}")
        groups[h] = g
    sample = ObservedSample(y, t, x, tuple(names), groups, outcome_type)
    log.info("loaded %d rows, %d covariates, %d group columns from %s",
             sample.n, sample.p, len(groups), path)
    return sample


def write_sample(sample: ObservedSample, path, y_col: str = "y", t_col: str = "t") -> None:
    """Write ``sample`` as CSV; floats use ``repr`` so reading back is exact."""
    header = [y_col, t_col, *sample.x_names, *sample.group_columns]
    binary = sample.outcome_type == "binary"
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        gcols = list(sample.group_columns.values())
        for i in range(sample.n):
            row = [str(int(sample.y[i])) if binary else repr(float(sample.y[i])),
                   str(int(sample.t[i]))]
            row += [repr(float(v)) for v in sample.x[i]]
            row += [str(int(g[i])) for g in gcols]
            w.writerow(row)


# ---------------------------------------------------------------------------
# Subgroup predicate language
#
# Expressions are Python-syntax comparisons over covariate names, e.g.
# "x1 > 0", "-1.28 < x2 < 1.28", "x3 + x4 > -2 and x5 <= 1",
# "x1 > q(x1, 0.9)".  q(col, prob) is the empirical type-7 quantile of the
# sample; ppf(prob) is the standard normal quantile.  "all" selects every unit.

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub,
           ast.Mult: operator.mul, ast.Div: operator.truediv}
_CMPOPS = {ast.Lt: operator.lt, ast.LtE: operator.le, ast.Gt: operator.gt,
           ast.GtE: operator.ge, ast.Eq: operator.eq, ast.NotEq: operator.ne}


def _eval_predicate(expr: str, sample: ObservedSample) -> np.ndarray:
    try:
        tree = ast.parse(expr.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValidationError(f"cannot parse subgroup expression {expr!r}: {exc.msg}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "all":
                return np.ones(sample.n, dtype=bool)
            if node.id in sample.group_columns:
                return sample.group_columns[node.id].astype(float)
            return sample.column(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            return ~np.asarray(ev(node.operand), dtype=bool)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.BoolOp):
            vals = [np.asarray(ev(v), dtype=bool) for v in node.values]
            combine = np.logical_and if isinstance(node.op, ast.And) else np.logical_or
            out = vals[0]
            for v in vals[1:]:
                out = combine(out, v)
            return out
        if isinstance(node, ast.Compare):
            left = ev(node.left)
            out = None
            for op, right_node in zip(node.ops, node.comparators):
                if type(op) not in _CMPOPS:
                    break
                right = ev(right_node)
                res = _CMPOPS[type(op)](left, right)
                out = res if out is None else np.logical_and(out, res)
                left = right
            else:
                return np.broadcast_to(np.asarray(out, dtype=bool), (sample.n,))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            args = node.args
            if node.func.id == "q" and len(args) == 2:
                col = np.asarray(ev(args[0]), dtype=float)
                prob = ev(args[1])
                return float(np.quantile(col, prob, method="linear"))
            if node.func.id == "ppf" and len(args) == 1:
                return float(norm.ppf(ev(args[0])))
        raise ValidationError(f"unsupported construct in subgroup expression {expr!r}")

    result = ev(tree)
    mask = np.broadcast_to(np.asarray(result), (sample.n,))
    if mask.dtype != bool:
        raise ValidationError(f"subgroup expression {expr!r} is not a comparison")
    return np.array(mask, dtype=bool)


def build_subgroups(sample: ObservedSample, spec=None, arms: Iterable[int] = (0, 1)) -> SubgroupFamily:
    """Evaluate subgroup definitions against ``sample``.

    ``spec`` is a list whose entries are expression strings, or dicts with a
    ``label`` and either an ``expr`` or a ``column`` (the name of a 0/1
    column loaded with the data). ``None`` uses every group column found in
    the sample. Each subgroup must have members in every arm of ``arms``.
    """
    if spec is None:
        if not sample.group_columns:
            raise ValidationError("no subgroup columns in the data and no subgroup definitions given")
        spec = [{"label": k, "column": k} for k in sample.group_columns]
    if isinstance(spec, Mapping) and "groups" in spec:
        spec = spec["groups"]
    if not spec:
        raise ValidationError("empty subgroup definition list")

    masks, labels = [], []
    for k, entry in enumerate(spec):
        if isinstance(entry, str):
            entry = {"expr": entry}
        label = entry.get("label") or entry.get("expr") or entry.get("column") or f"A{k + 1}"
        if "column" in entry:
            col = entry["column"]
            if col not in sample.group_columns:
                raise ValidationError(f"subgroup column {col!r} not found in data")
            mask = np.array(sample.group_columns[col], dtype=bool)
        elif "expr" in entry:
            mask = _eval_predicate(str(entry["expr"]), sample)
        else:
            raise ValidationError(f"subgroup entry {k + 1} needs 'expr' or 'column'")
        masks.append(mask)
        labels.append(str(label))
    family = SubgroupFamily(np.column_stack(masks), tuple(labels))
    family.check_positivity(sample.t, arms)
    return family


def decile_expressions(name: str = "x1", k: int = 10) -> list[dict]:
    """Half-open empirical ``k``-tile bins of one covariate, covering every unit."""
    out = []
    for j in range(k):
        lo, hi = j / k, (j + 1) / k
        if j == 0:
            expr = f"{name} <= q({name}, {hi!r})"
        elif j == k - 1:
            expr = f"{name} > q({name}, {lo!r})"
        else:
            expr = f"q({name}, {lo!r}) < {name} <= q({name}, {hi!r})"
        out.append({"label": f"{name}_q{j + 1}", "expr": expr})
    return out
