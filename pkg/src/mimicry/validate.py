"""Distributional checks for mimicking counterfactuals.

The main check compares, stratum by stratum, the mimicking values
``X_psi(t)`` of one cohort with the true counterfactuals ``Y^(t)`` of
another. It uses two-sample Kolmogorov-Smirnov tests with the asymptotic
critical value. Strata are the discretized history up to ``t`` crossed
with the decision time. The module also has a probability-integral-transform
test, a finite-difference check of the quantile-derivative identity, and an
audit of the regularity constants.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError
from .paths import SamplePath, discretize
from .shift_models import RegularityBudget

log = logging.getLogger(__name__)

__all__ = [
    "ks_statistic",
    "ks_critical_value",
    "StratumTestReport",
    "conditional_ks",
    "PITReport",
    "pit_uniformity",
    "quantile_identity_check",
    "identity_scaling",
    "AuditViolation",
    "regularity_audit",
    "history_strata",
    "mimicry_check",
    "MimicryReport",
]


def ks_statistic(a, b) -> float:
    """Two-sample statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DomainError("empty sample")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical_value(alpha: float, na: int, nb: int) -> float:
    """Asymptotic critical value ``c(alpha) * sqrt((na + nb) / (na * nb))``."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    return math.sqrt(-math.log(alpha / 2) / 2) * math.sqrt((na + nb) / (na * nb))


@dataclass(frozen=True)
class StratumTestReport:
    stratum: tuple
    n_a: int
    n_b: int
    statistic: float
    critical_value: float
    passed: bool


def conditional_ks(
    samples_a: Mapping, samples_b: Mapping, alpha: float = 0.01, min_size: int = 1
) -> list[StratumTestReport]:
    """KS test in every stratum where both samples have at least ``max(min_size, 2)`` points.

    A stratum passes when the statistic is strictly below the critical
    value. Skipped strata are logged at debug level.
    """
    out = []
    for key in sorted(set(samples_a) | set(samples_b), key=repr):
        a, b = np.asarray(samples_a.get(key, ())), np.asarray(samples_b.get(key, ()))
        if min(a.size, b.size) < max(min_size, 2):
            log.debug("skipping stratum %r with sizes %d and %d", key, a.size, b.size)
            continue
        d = ks_statistic(a, b)
        c = ks_critical_value(alpha, a.size, b.size)
        out.append(StratumTestReport(key, int(a.size), int(b.size), d, c, d < c))
    return out


@dataclass(frozen=True)
class PITReport:
    statistic: float
    p_value: float
    passed: bool
    n: int


def pit_uniformity(values, alpha: float = 0.01) -> PITReport:
    """One-sample KS test of ``values`` against Uniform(0, 1)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DomainError("empty sample")
    res = stats.kstest(v, "uniform")
    return PITReport(float(res.statistic), float(res.pvalue), bool(res.pvalue >= alpha), int(v.size))


def quantile_identity_check(family, points, step: float = 1e-5) -> np.ndarray:
    """Residuals of ``dF_h(y)/dh + F_h'(y) * (dF_h^{-1}/dh)(F_h(y)) = 0``.

    ``family`` is a conditional model whose time argument plays the role of
    ``h``. Every derivative is a central difference with ``step``. The
    derivative of the inverse is taken at the fixed level ``F_h(y)``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    y, h = pts[:, 0], pts[:, 1]
    p = family.cdf(y, h)
    dF_dh = (family.cdf(y, h + step) - family.cdf(y, h - step)) / (2 * step)
    dF_dy = (family.cdf(y + step, h) - family.cdf(y - step, h)) / (2 * step)
    dinv_dh = (np.asarray(family.ppf(p, h + step)) - np.asarray(family.ppf(p, h - step))) / (2 * step)
    return np.asarray(dF_dh + dF_dy * dinv_dh, dtype=float)


def identity_scaling(family, points, steps=(1e-3, 1e-4, 1e-5)) -> dict:
    """Max residual per step and the observed order between the two largest steps."""
    res = {s: float(np.max(np.abs(quantile_identity_check(family, points, s)))) for s in steps}
    s0, s1 = steps[0], steps[1]
    if res[s0] == 0.0:
        order = math.inf
    elif res[s1] == 0.0:
        order = math.inf
    else:
        order = math.log(res[s0] / res[s1]) / math.log(s0 / s1)
    return {"residuals": res, "order": order}


@dataclass(frozen=True)
class AuditViolation:
    constant: str
    y: float
    t: float
    value: float
    limit: float


def regularity_audit(family, budget: RegularityBudget, mesh, h: Sequence[float] = (0.0,)) -> list[AuditViolation]:
    """Check a conditional model against ``budget`` on a ``(ys, ts)`` mesh.

    Checks the density floor on ``[y1, y2]``, the bounds on the density and
    on ``|dF/dt|`` at shifted times ``t + h``, and the Lipschitz constants
    of both between neighbouring mesh points in ``y``.
    """
    ys, ts = (np.asarray(m, dtype=float) for m in mesh)
    ys = np.sort(ys)
    out: list[AuditViolation] = []
    inside = (ys >= budget.y1) & (ys <= budget.y2)
    for t in ts:
        dens = np.asarray(family.pdf(ys, t), dtype=float)
        for y, v in zip(ys[inside], dens[inside]):
            if v < budget.eps:
                out.append(AuditViolation("eps", float(y), float(t), float(v), budget.eps))
        for hh in h:
            d1 = np.asarray(family.pdf(ys, t + hh), dtype=float)
            d2 = np.abs(np.asarray(family.dcdf_dt(ys, t + hh), dtype=float))
            for name, vals, lim in (("c1", d1, budget.c1), ("c2", d2, budget.c2)):
                for i in np.flatnonzero(vals > lim * (1 + 1e-12)):
                    out.append(AuditViolation(name, float(ys[i]), float(t + hh), float(vals[i]), lim))
            dy = np.diff(ys)
            for name, vals, lim in (("l1", d1, budget.l1), ("l2", np.asarray(family.dcdf_dt(ys, t + hh)), budget.l2)):
                slope = np.abs(np.diff(vals)) / dy
                for i in np.flatnonzero(slope > lim * (1 + 1e-9)):
                    out.append(AuditViolation(name, float(ys[i]), float(t + hh), float(slope[i]), lim))
    return out


def history_strata(
    paths: Sequence[SamplePath],
    times: Sequence[float],
    level: int,
    status: str | None = None,
    alive: str | None = None,
) -> list[list]:
    """Stratum key of every path at every time (``None`` for excluded entries).

    The key is ``(time index, status at t, level-discretized history on the
    grid up to t)``. When ``alive`` names a coordinate, entries where it is
    zero at ``t`` are excluded.
    """
    keys = []
    for p in paths:
        disc = discretize(p, level)
        row = []
        for j, t in enumerate(times):
            z = p.value_at(t)
            if alive is not None and z[p.index(alive)] == 0:
                row.append(None)
                continue
            k = int(np.searchsorted(disc.grid, t, side="right")) - 1
            st = int(z[p.index(status)]) if status is not None else None
            row.append((j, st, disc.prefix(k)))
        keys.append(row)
    return keys


def _group(values: np.ndarray, keys: list[list]) -> dict:
    out: dict = {}
    for i, row in enumerate(keys):
        for j, key in enumerate(row):
            if key is not None:
                out.setdefault(key, []).append(values[i, j])
    return {k: np.asarray(v) for k, v in out.items()}


@dataclass
class MimicryReport:
    strata: list[StratumTestReport]
    alpha: float
    min_size: int

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    @property
    def pass_rate(self) -> float:
        return sum(r.passed for r in self.strata) / self.n_strata if self.strata else math.nan

    def summary(self) -> dict:
        return {"n_strata": self.n_strata, "pass_rate": self.pass_rate, "alpha": self.alpha, "min_size": self.min_size}

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum_id", "n_a", "n_b", "ks_stat", "critical_value", "pass"])
        for r in self.strata:
            w.writerow([json.dumps(r.stratum), r.n_a, r.n_b, repr(r.statistic), repr(r.critical_value), int(r.passed)])

    def write_json(self, fh) -> None:
        json.dump(self.summary(), fh, sort_keys=True)


def mimicry_check(
    x_values: np.ndarray,
    paths_a: Sequence[SamplePath],
    cf_values: np.ndarray,
    paths_b: Sequence[SamplePath],
    times: Sequence[float],
    level: int = 2,
    alpha: float = 0.01,
    min_size: int = 500,
    status: str | None = None,
    alive: str | None = None,
) -> MimicryReport:
    """Stratified KS comparison of mimicking values against counterfactuals.

    ``x_values[i, j]`` is ``X_psi(times[j])`` for ``paths_a[i]``, and
    ``cf_values`` holds ``Y^(times[j])`` for ``paths_b``. The two cohorts
    may be the same or independent draws.
    """
    ka = history_strata(paths_a, times, level, status, alive)
    kb = ka if paths_b is paths_a else history_strata(paths_b, times, level, status, alive)
    reports = conditional_ks(_group(np.asarray(x_values), ka), _group(np.asarray(cf_values), kb), alpha, min_size)
    return MimicryReport(reports, alpha, min_size)
