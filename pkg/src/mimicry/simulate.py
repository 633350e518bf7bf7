"""Simulated cohorts with known counterfactuals.

Continuous-time scenarios are rank preserving. A latent untreated outcome
``U`` is drawn first. Covariates and treatment then evolve on a decision
grid, and the observed outcome is the value whose mimicking counterfactual
under the true blip parameter equals ``U``. Because of that, ``Y^(t)`` is
available exactly for every subject and every ``t``.

Every subject draws from its own counter-based stream keyed by
``(seed, subject index)``. A cohort of size ``n`` is therefore the prefix
of any larger cohort with the same seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import betaincinv, expit

from .errors import DomainError
from .gcomp import TreatmentTree, figure1_tree
from .paths import SamplePath, write_paths_csv
from .shift_models import ShiftModel

__all__ = [
    "SCENARIO_KINDS",
    "Scenario",
    "Dataset",
    "subject_uniforms",
    "simulate_observed",
    "simulate_counterfactual",
    "build_figure_tree",
    "shift_model_for",
    "tree_counts",
]

SCENARIO_KINDS = ("GvHDSurvival", "PCPContinuous", "DiscreteTree", "NullEffect")

_DEFAULT_PSI = {
    "GvHDSurvival": (math.log(2.0),),
    "PCPContinuous": (0.4, -0.3, 0.1),
    "DiscreteTree": (),
    "NullEffect": (0.0,),
}


@dataclass(frozen=True)
class Scenario:
    """Data-generating process.

    ``covariate`` holds logistic coefficients ``(intercept, prognosis,
    treated)`` for the onset of the time-varying covariate (CMV or PCP) at
    each decision time. For survival the prognosis is minus the remaining
    untreated lifetime. For the continuous kind it is minus the
    standardized baseline outcome. ``treatment_policy`` holds
    ``(intercept, covariate)`` for treatment onset given the current
    covariate. Treatment and covariate are absorbing.
    """

    kind: str
    true_psi: tuple = ()
    horizon: float = 1.0
    n_decisions: int = 10
    treatment_policy: tuple = (-2.0, 1.5)
    covariate: tuple = (-2.0, 1.0, 0.5)
    baseline_rate: float = 1.0
    y1: float = 0.0
    y2: float = 10.0
    tree: TreatmentTree | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise DomainError(f"unknown scenario kind {self.kind!r}; choose from {SCENARIO_KINDS}")
        psi = tuple(float(p) for p in (self.true_psi if len(self.true_psi) else _DEFAULT_PSI[self.kind]))
        if self.kind == "NullEffect" and any(psi):
            raise DomainError("NullEffect requires psi = 0")
        object.__setattr__(self, "true_psi", psi)
        object.__setattr__(self, "treatment_policy", tuple(float(v) for v in self.treatment_policy))
        object.__setattr__(self, "covariate", tuple(float(v) for v in self.covariate))
        if self.horizon <= 0 or self.n_decisions < 1:
            raise DomainError("need a positive horizon and at least one decision time")
        if not self.y1 < self.y2:
            raise DomainError("need y1 < y2")
        if self.kind in ("GvHDSurvival", "NullEffect") and self.y2 < self.horizon:
            raise DomainError("survival scenarios need y2 >= horizon")
        if self.kind == "DiscreteTree" and self.tree is None:
            object.__setattr__(self, "tree", figure1_tree())

    @property
    def decision_grid(self) -> np.ndarray:
        return self.horizon * np.arange(self.n_decisions) / self.n_decisions

    @property
    def survival(self) -> bool:
        return self.kind in ("GvHDSurvival", "NullEffect")

    @property
    def names(self) -> tuple[str, ...]:
        if self.survival:
            return ("alive", "cmv", "gvhd")
        if self.kind == "PCPContinuous":
            return ("treated", "pcp", "arm")
        return tuple(v.name for v in self.tree.variables)

    @property
    def treatment(self) -> str:
        return {"PCPContinuous": "treated", "DiscreteTree": "proph"}.get(self.kind, "gvhd")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_psi"] = list(self.true_psi)
        d["treatment_policy"] = list(self.treatment_policy)
        d["covariate"] = list(self.covariate)
        d["tree"] = self.tree.to_dict() if self.tree is not None else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        d = dict(d)
        if "kind" not in d:
            raise DomainError("scenario spec lacks 'kind'")
        tree = d.pop("tree", None)
        if tree is not None:
            tree = TreatmentTree.from_dict(tree)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DomainError(f"unknown scenario fields {sorted(extra)}")
        for key in ("true_psi", "treatment_policy", "covariate"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(tree=tree, **d)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def shift_model_for(scenario: Scenario, psi=None) -> ShiftModel:
    """The shift model that generated ``scenario`` (at ``psi`` if given)."""
    psi = scenario.true_psi if psi is None else psi
    if scenario.survival:
        return ShiftModel("GvHDMultiplicative", psi, "Survival")
    if scenario.kind == "PCPContinuous":
        return ShiftModel("PCPProphylaxis", psi, "Continuous")
    raise DomainError("the treatment tree has no continuous-time shift model")


@dataclass
class Dataset:
    """A simulated cohort."""

    scenario: Scenario
    seed: int
    paths: list
    y: np.ndarray
    died: np.ndarray
    latent: dict

    @property
    def n(self) -> int:
        return len(self.paths)

    @property
    def names(self) -> tuple[str, ...]:
        return self.paths[0].names

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.scenario.to_json().encode())
        h.update(str(self.seed).encode())
        h.update(np.ascontiguousarray(self.y).tobytes())
        for p in self.paths:
            h.update(p.times.tobytes())
            h.update(p.values.tobytes())
        return h.hexdigest()

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.scenario,
            self.seed,
            [self.paths[i] for i in rows],
            self.y[rows],
            self.died[rows],
            {k: v[rows] for k, v in self.latent.items()},
        )

    def write_outcomes_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "y", "died"])
        for i, (y, d) in enumerate(zip(self.y, self.died)):
            w.writerow([i, repr(float(y)), int(d)])

    def write_paths_csv(self, fh) -> None:
        write_paths_csv(fh, self.paths)


def subject_uniforms(seed: int, n: int, width: int, start: int = 0) -> np.ndarray:
    """``n`` rows of ``width`` uniforms; row ``i`` depends only on ``(seed, start + i)``."""
    if seed < 0:
        raise DomainError("seed must be nonnegative")
    out = np.empty((n, width))
    for i in range(n):
        bg = np.random.Philox(key=seed, counter=[0, start + i, 0, 0])
        out[i] = np.random.Generator(bg).random(width)
    return out


def _event_paths(horizon, names, t0_values, events):
    """Build paths from per-subject event lists ``[(time, coord index, value), ...]``."""
    paths = []
    for z0, evs in zip(t0_values, events):
        times, rows = [0.0], [np.array(z0, dtype=float)]
        for t, j, v in sorted(evs):
            if t <= 0.0:
                rows[0][j] = v
                continue
            if t > horizon:
                continue
            if t == times[-1]:
                rows[-1][j] = v
            else:
                row = rows[-1].copy()
                row[j] = v
                times.append(t)
                rows.append(row)
        paths.append(SamplePath(horizon, times, np.array(rows), names))
    return paths


def _simulate_survival(sc: Scenario, u: np.ndarray):
    n = len(u)
    K, dt = sc.n_decisions, sc.horizon / sc.n_decisions
    psi = sc.true_psi[0]
    c0, c1, c2 = sc.covariate
    g0, g1 = sc.treatment_policy
    lam = sc.baseline_rate
    U = -np.log1p(-u[:, 0] * -np.expm1(-lam * sc.y2)) / lam  # Exp(rate) truncated to [0, y2]
    remaining = U.copy()
    alive = np.ones(n, dtype=bool)
    cmv = np.zeros(n, dtype=bool)
    gvhd = np.zeros(n, dtype=bool)
    cmv_t = np.full(n, np.inf)
    gvhd_t = np.full(n, np.inf)
    y = np.full(n, np.nan)
    for k in range(K):
        s = k * dt
        p_cmv = expit(c0 - c1 * remaining + c2 * gvhd)
        new = alive & ~cmv & (u[:, 1 + 2 * k] < p_cmv)
        cmv |= new
        cmv_t[new] = s
        p_trt = expit(g0 + g1 * cmv)
        start = alive & ~gvhd & (u[:, 2 + 2 * k] < p_trt)
        gvhd |= start
        gvhd_t[start] = s
        rate = np.where(gvhd, math.exp(psi), 1.0)
        dies = alive & (remaining <= rate * dt)
        y[dies] = s + remaining[dies] / rate[dies]
        remaining = np.where(alive & ~dies, remaining - rate * dt, remaining)
        alive &= ~dies
    # survivors at the horizon continue untreated
    y[alive] = sc.horizon + remaining[alive]
    died = y <= sc.horizon
    events = []
    for i in range(n):
        ev = []
        if np.isfinite(cmv_t[i]):
            ev.append((cmv_t[i], 1, 1.0))
        if np.isfinite(gvhd_t[i]):
            ev.append((gvhd_t[i], 2, 1.0))
        if died[i]:
            ev.append((y[i], 0, 0.0))
        events.append(ev)
    paths = _event_paths(sc.horizon, sc.names, [(1.0, 0.0, 0.0)] * n, events)
    return paths, y, died, {"u": U, "treat_start": gvhd_t}


def _simulate_pcp(sc: Scenario, u: np.ndarray):
    n = len(u)
    K, dt = sc.n_decisions, sc.horizon / sc.n_decisions
    p1, p2, p3 = sc.true_psi
    c0, c1, c2 = sc.covariate
    g0, g1 = sc.treatment_policy
    U = sc.y1 + (sc.y2 - sc.y1) * betaincinv(2.0, 2.0, u[:, 0])
    z = (U - 0.5 * (sc.y1 + sc.y2)) / (sc.y2 - sc.y1) * 4.0
    arm = np.where(u[:, 1] < 0.5, 1.0, 2.0)
    pcp = np.zeros(n, dtype=bool)
    trt = np.zeros(n, dtype=bool)
    pcp_t = np.full(n, np.inf)
    trt_t = np.full(n, np.inf)
    shift_int = np.zeros(n)
    for k in range(K):
        s = k * dt
        new = ~pcp & (u[:, 2 + 2 * k] < expit(c0 - c1 * z + c2 * trt))
        pcp |= new
        pcp_t[new] = s
        start = ~trt & (u[:, 3 + 2 * k] < expit(g0 + g1 * pcp))
        trt |= start
        trt_t[start] = s
        d = (1.0 - np.exp(p1 + p2 * pcp + p3 * arm)) * trt
        shift_int += d * dt
    y = U + shift_int
    events = []
    for i in range(n):
        ev = []
        if np.isfinite(pcp_t[i]):
            ev.append((pcp_t[i], 1, 1.0))
        if np.isfinite(trt_t[i]):
            ev.append((trt_t[i], 0, 1.0))
        events.append(ev)
    paths = _event_paths(sc.horizon, sc.names, [(0.0, 0.0, a) for a in arm], events)
    return paths, y, np.zeros(n, dtype=bool), {"u": U, "treat_start": trt_t}


def _simulate_tree(sc: Scenario, u: np.ndarray):
    tree = sc.tree
    n = len(u)
    nv = len(tree.variables)
    hist = np.zeros((n, nv), dtype=int)
    surv = np.zeros(n, dtype=bool)
    for i in range(n):
        prefix: tuple[int, ...] = ()
        for j in range(nv):
            kids = tree.children(prefix)
            counts = np.array([tree.count(prefix + (c,)) for c in kids], dtype=float)
            cut = np.cumsum(counts) / counts.sum()
            prefix += (kids[int(np.searchsorted(cut, u[i, j], side="right"))],)
        hist[i] = prefix
        s, d = tree.leaves[prefix]
        surv[i] = u[i, nv] < s / (s + d)
    # one decision per variable on an even grid over [0, horizon)
    times = sc.horizon * np.arange(nv) / nv
    paths = []
    for h in hist:
        rows = np.zeros((nv, nv))
        for j in range(nv):
            rows[j:, j] = h[j]
        paths.append(SamplePath(sc.horizon, times, rows, sc.names))
    y = surv.astype(float)
    return paths, y, ~surv, {"history": hist}


def simulate_observed(scenario: Scenario, n: int, seed: int) -> Dataset:
    """Simulate ``n`` subjects; identical inputs give bit-identical output."""
    if n < 1:
        raise DomainError("n must be positive")
    if scenario.kind == "DiscreteTree":
        width = len(scenario.tree.variables) + 1
        gen = _simulate_tree
    else:
        width = 2 + 2 * scenario.n_decisions
        gen = _simulate_pcp if scenario.kind == "PCPContinuous" else _simulate_survival
    u = subject_uniforms(seed, n, width)
    paths, y, died, latent = gen(scenario, u)
    return Dataset(scenario, int(seed), paths, y, died, latent)


def simulate_counterfactual(scenario: Scenario, dataset: Dataset, t) -> np.ndarray:
    """``Y^(t)``: factual treatment until ``t``, none afterwards.

    The observed outcome minus the effect of the treatment received after
    ``t``, so ``Y^(horizon)`` and ``Y^(t)`` for ``t`` past death are the
    observed outcome exactly. Returns shape ``(n,)`` for scalar ``t`` and
    ``(n, len(t))`` otherwise.
    """
    if scenario.kind == "DiscreteTree":
        raise DomainError("the treatment tree has no continuous-time counterfactuals")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any((ts < 0) | (ts > scenario.horizon)):
        raise DomainError("t outside [0, horizon]")
    y = dataset.y[:, None]
    tt = ts[None, :]
    if scenario.survival:
        start = dataset.latent["treat_start"][:, None]
        end = np.minimum(y, scenario.horizon)
        # treated time in [t, min(Y, horizon)]; each unit of it used up e^psi units of untreated lifetime
        later = np.clip(end - np.maximum(tt, start), 0.0, None)
        out = np.where(tt < y, y + math.expm1(scenario.true_psi[0]) * later, y)
    else:
        p1, p2, p3 = scenario.true_psi
        out = y + np.zeros_like(tt)
        for i, p in enumerate(dataset.paths):
            r = p.value_at(0.0)[p.index("arm")]
            times = np.append(p.times, scenario.horizon)
            a_col, h_col = p.index("treated"), p.index("pcp")
            for k in range(len(p.times)):
                a, h = p.values[k, a_col], p.values[k, h_col]
                if not a:
                    continue
                d = 1.0 - math.exp(p1 + p2 * h + p3 * r)
                out[i] -= d * np.clip(times[k + 1] - np.maximum(tt[0], times[k]), 0.0, None)
    return out[:, 0] if np.ndim(t) == 0 else out


def write_counterfactuals_csv(fh, dataset: Dataset, times) -> None:
    cf = simulate_counterfactual(dataset.scenario, dataset, np.atleast_1d(times))
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["subject_id", "t", "y_cf"])
    for i in range(dataset.n):
        for j, t in enumerate(np.atleast_1d(times)):
            w.writerow([i, repr(float(t)), repr(float(cf[i, j]))])


def build_figure_tree(n_decisions: int = 2) -> Scenario:
    """Scenario that samples subjects from the AZT / PCP / prophylaxis tree."""
    return Scenario("DiscreteTree", horizon=1.0, n_decisions=n_decisions, tree=figure1_tree())


def tree_counts(dataset: Dataset) -> dict[tuple[int, ...], int]:
    """Number of simulated subjects per complete history."""
    hist = dataset.latent["history"]
    keys, counts = np.unique(hist, axis=0, return_counts=True)
    return {tuple(int(v) for v in k): int(c) for k, c in zip(keys, counts)}
