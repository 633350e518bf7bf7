"""Backward construction of mimicking counterfactuals.

Given an observed outcome ``Y`` and a covariate/treatment path, the
mimicking process solves ``X'(t) = D(X(t), t; path)`` backwards from
``X(tau) = Y``. Between jumps of the path the right-hand side is smooth,
so the solver restarts at every jump. On each piece it uses the path
value held on that piece, which at the right endpoint is the left limit.

:func:`solve_backward` is the general adaptive Dormand-Prince route.
:class:`PathTable` integrates families that are constant in ``y``
exactly and in bulk. It is used when many subjects and many parameter
values are needed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, ModelValidityError, SolverError
from .paths import SamplePath
from .shift_models import RegularityBudget, ShiftModel, gronwall_constant

__all__ = [
    "SolverOptions",
    "Trajectory",
    "SurvivalReport",
    "solve_backward",
    "gronwall_gap_bound",
    "check_survival_constraints",
    "PathTable",
]

# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = _A[6] + (0.0,)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


@dataclass(frozen=True)
class SolverOptions:
    atol: float = 1e-10
    rtol: float = 1e-8
    max_steps: int = 100_000
    max_step: float = math.inf
    below_diagonal_tol: float = 1e-9


@dataclass
class Trajectory:
    """Solution of the backward ODE on an increasing mesh."""

    mesh: np.ndarray
    values: np.ndarray
    final_value: float
    kind: str
    report: dict = field(default_factory=dict)

    def at(self, t):
        """Linear interpolation of the solution (exact at mesh points)."""
        t = np.asarray(t, dtype=float)
        if np.any((t < self.mesh[0]) | (t > self.mesh[-1])):
            raise DomainError("evaluation time outside the trajectory")
        return np.interp(t, self.mesh, self.values)

    @property
    def start_value(self) -> float:
        return float(self.values[0])

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x"])
        for t, x in zip(self.mesh, self.values):
            w.writerow([repr(float(t)), repr(float(x))])

    def report_json(self) -> str:
        return json.dumps(self.report, sort_keys=True)


def _dopri_step(f, t, x, h, k1):
    k = [k1]
    for i in range(1, 7):
        xi = x + h * sum(a * kj for a, kj in zip(_A[i], k))
        k.append(f(xi, t + _C[i] * h))
    x_new = x + h * sum(b * kj for b, kj in zip(_B5, k))
    err = abs(h * sum(e * kj for e, kj in zip(_E, k)))
    return x_new, err, k


def _dopri_interval(f, t_hi, t_lo, x, opts, counters, event=None, side=None):
    """Integrate ``x' = f(x, t)`` from ``t_hi`` down to ``t_lo``; returns mesh, values.

    ``event(x, t)`` is an optional continuous function and ``side`` tells
    whether it is positive on the branch ``f`` belongs to. When its sign at
    the end of a step disagrees with ``side``, the step is shortened to end
    at its zero and integration stops there. The caller then switches
    the right-hand side and restarts. The return value then has a third
    element ``True``.
    """
    ts, xs = [t_hi], [x]
    t = t_hi
    span = t_hi - t_lo
    h = -min(span, opts.max_step)
    k1 = f(x, t)
    counters["evals"] += 1
    while t > t_lo:
        if counters["steps"] >= opts.max_steps:
            raise SolverError(f"step budget of {opts.max_steps} exhausted at t={t}")
        if t + h < t_lo:
            h = t_lo - t
        x_new, err, k = _dopri_step(f, t, x, h, k1)
        counters["evals"] += 6
        scale = opts.atol + opts.rtol * max(abs(x), abs(x_new))
        ratio = err / scale
        counters["steps"] += 1
        if not math.isfinite(x_new):
            raise SolverError(f"non-finite state at t={t + h}")
        if ratio <= 1.0:
            if event is not None and (event(x_new, t + h) > 0) != side:
                h, x_new = _locate_event(f, event, t, x, h, k1, counters)
                ts.append(t + h)
                xs.append(x_new)
                return ts, xs, True
            t_next = t + h
            if t_next - t_lo <= 1e-15 * max(1.0, abs(t_lo)):
                t_next = t_lo
            t, x = t_next, x_new
            ts.append(t)
            xs.append(x)
            k1 = k[6]
            counters["max_ratio"] = max(counters["max_ratio"], float(ratio))
            grow = 5.0 if ratio == 0 else min(5.0, 0.9 * ratio**-0.2)
            h = max(h * grow, -min(span, opts.max_step))
        else:
            counters["rejected"] += 1
            h *= max(0.2, 0.9 * ratio**-0.25)
            if abs(h) < 1e-14 * max(1.0, abs(t)):
                raise SolverError(f"step size underflow at t={t}")
    return ts, xs, False


def _locate_event(f, event, t, x, h, k1, counters):
    """Step length in ``(0, h]`` at which ``event`` along the step reaches zero.

    The accepted step of length ``h`` is accurate for any shorter length
    too, since ``f`` is smooth on the frozen branch.
    """

    def g(s):
        counters["evals"] += 6
        return event(_dopri_step(f, t, x, s, k1)[0], t + s)

    g0, gh = event(x, t), g(h)
    # at a restart g0 can carry rounding noise of either sign; then the zero is at the start
    s = brentq(g, h, 0.0, xtol=1e-15, rtol=4 * np.finfo(float).eps) if g0 * gh < 0 else 0.0
    counters["switches"] += 1
    return s, _dopri_step(f, t, x, s, k1)[0]


def solve_backward(
    model: ShiftModel,
    path: SamplePath,
    y: float,
    opts: SolverOptions | None = None,
) -> Trajectory:
    """Solve the backward ODE for one subject.

    Survival outcomes are held at ``y`` on ``[min(y, tau), tau]``, and the
    integration starts from ``min(y, tau)``. Raises
    :class:`ModelValidityError` if a survival trajectory falls below the
    diagonal by more than ``opts.below_diagonal_tol``.
    """
    opts = opts or SolverOptions()
    y = float(y)
    if not math.isfinite(y):
        raise DomainError("outcome must be finite")
    tau = path.horizon
    f_state = model.bind(path.names)
    survival = model.survival
    stop = min(y, tau) if survival else tau
    if survival and stop < 0:
        raise DomainError("survival time must be nonnegative")
    breaks = [float(s) for s in path.times if 0.0 < s < stop]
    edges = [0.0, *breaks, stop]
    counters = {"steps": 0, "rejected": 0, "evals": 0, "max_ratio": 0.0, "switches": 0}
    event = model.switching()
    if event is not None and survival:
        ev_clamped = lambda xx, tt: event(xx if xx > tt else tt, tt)
    else:
        ev_clamped = event
    mesh, vals = [], []
    x = y
    side = None
    for lo, hi in zip(reversed(edges[:-1]), reversed(edges[1:])):
        if hi <= lo:
            continue
        z = path.value_at(lo)  # value held on [lo, hi), i.e. the left limit at hi
        top, switches = hi, 0
        while top > lo:
            if event is None:
                g, ev = f_state, None
            else:
                if side is None:
                    side = ev_clamped(x, top) > 0
                g, ev = model.bind(path.names, branch=side), ev_clamped
            if survival:
                f = lambda xx, tt, z=z, g=g: g(xx if xx > tt else tt, tt, z)
            else:
                f = lambda xx, tt, z=z, g=g: g(xx, tt, z)
            ts, xs, stopped = _dopri_interval(f, top, lo, x, opts, counters, ev, side)
            if mesh:
                ts, xs = ts[1:], xs[1:]
            mesh.extend(ts)
            vals.extend(xs)
            if xs:
                x = xs[-1]
            if not stopped:
                break
            top, side = mesh[-1], not side
            switches += 1
            if switches > 1000:
                raise SolverError(f"trajectory chatters on the switching surface near t={top}")
    if not mesh:
        mesh, vals = [stop], [y]
    mesh = np.asarray(mesh[::-1])
    vals = np.asarray(vals[::-1])
    if survival and stop < tau:
        mesh = np.append(mesh, tau)
        vals = np.append(vals, y)
    report = {
        "steps": counters["steps"],
        "rejected": counters["rejected"],
        "evaluations": counters["evals"],
        "pieces": len(edges) - 1,
        "max_error_ratio": counters["max_ratio"],
        "branch_switches": counters["switches"],
        "atol": opts.atol,
        "rtol": opts.rtol,
    }
    if survival:
        below = mesh < y
        margin = float(np.min(vals[below] - mesh[below])) if below.any() else math.inf
        report["min_margin_above_diagonal"] = margin
        if margin < -opts.below_diagonal_tol * max(1.0, abs(y)):
            raise ModelValidityError(f"trajectory falls {-margin:.3g} below the diagonal; is D(t, t) > 1?")
    elif model.budget is not None:
        b = model.budget
        report["in_support"] = bool(np.all((vals >= b.y1) & (vals <= b.y2)))
    return Trajectory(mesh, vals, y, model.outcome_kind, report)


def gronwall_gap_bound(
    traj: Trajectory,
    shift_gap,
    budget: RegularityBudget | None = None,
    *,
    lipschitz: float | None = None,
    rtol: float = 1e-3,
    max_doublings: int = 14,
) -> float:
    """Grönwall bound ``int_0^tau exp(C s) |gap(X(s), s)| ds`` along ``traj``.

    ``shift_gap`` is either an array of gap values on ``traj.mesh``, which
    is integrated with the trapezoid rule, or a vectorized callable
    ``gap(x, t)``. The gap is usually discontinuous at mesh nodes (grid
    points and jumps), so a callable is integrated with the composite
    midpoint rule. The mesh is doubled until the estimate changes by less
    than ``rtol``. ``C`` is the Lipschitz constant in ``y`` of the shift
    function being compared. It is given directly as ``lipschitz`` or
    derived from ``budget`` via :func:`gronwall_constant`.
    """
    if (budget is None) == (lipschitz is None):
        raise DomainError("give exactly one of budget or lipschitz")
    C = gronwall_constant(budget) if budget is not None else float(lipschitz)
    if C < 0:
        raise DomainError("Lipschitz constant must be nonnegative")
    mesh = traj.mesh
    if not callable(shift_gap):
        g = np.asarray(shift_gap, dtype=float)
        if g.shape != mesh.shape:
            raise DomainError(f"gap has {g.size} values but the trajectory mesh has {mesh.size}")
        f = np.exp(C * mesh) * np.abs(g)
        return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(mesh)))

    def estimate(m):
        mid = 0.5 * (m[1:] + m[:-1])
        g = np.broadcast_to(np.asarray(shift_gap(traj.at(mid), mid), dtype=float), mid.shape)
        return float(np.sum(np.exp(C * mid) * np.abs(g) * np.diff(m)))

    m = mesh
    prev = estimate(m)
    for _ in range(max_doublings):
        m = np.sort(np.concatenate([m, 0.5 * (m[1:] + m[:-1])]))
        cur = estimate(m)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return cur
        prev = cur
    return prev


@dataclass(frozen=True)
class SurvivalReport:
    passed: bool
    min_margin: float
    max_post_event_deviation: float
    worst_time: float


def check_survival_constraints(traj: Trajectory, y: float, tol: float = 1e-9) -> SurvivalReport:
    """Check ``X(t) >= t`` before the event and ``X(t) == y`` from the event on."""
    before = traj.mesh < y
    after = ~before
    margins = traj.values[before] - traj.mesh[before]
    min_margin = float(margins.min()) if before.any() else math.inf
    worst = float(traj.mesh[before][np.argmin(margins)]) if before.any() else math.nan
    dev = float(np.max(np.abs(traj.values[after] - y))) if after.any() else 0.0
    return SurvivalReport(min_margin >= -tol and dev == 0.0, min_margin, dev, worst)


class PathTable:
    """Many paths packed into padded arrays for exact bulk integration.

    Only families whose shift is constant in ``y`` between jumps qualify.
    For them the backward solution is ``y - int_t^stop D(s) ds``, where
    ``stop`` is ``min(y, tau)`` for survival outcomes and ``tau`` otherwise.
    Survival outcomes give ``X(t) = y`` for ``t >= y``.
    """

    def __init__(self, paths: Sequence[SamplePath], ys: Sequence[float]):
        if not paths:
            raise DomainError("no paths")
        self.names = paths[0].names
        self.horizon = paths[0].horizon
        n = len(paths)
        m = max(len(p.times) for p in paths)
        d = paths[0].dim
        T = np.full((n, m), np.inf)
        S = np.zeros((n, m, d))
        for i, p in enumerate(paths):
            if p.names != self.names or p.horizon != self.horizon:
                raise DomainError("paths must share names and horizon")
            k = len(p.times)
            T[i, :k] = p.times
            S[i, :k] = p.values
            S[i, k:] = p.values[-1]
        self.T, self.S = T, S
        self.ys = np.asarray(ys, dtype=float)
        if self.ys.shape != (n,):
            raise DomainError("one outcome per path is required")
        ends = np.concatenate([T[:, 1:], np.full((n, 1), np.inf)], axis=1)
        self.ends = np.minimum(ends, self.horizon)
        self.lengths = np.clip(self.ends - np.minimum(T, self.horizon), 0.0, None)

    def __len__(self):
        return len(self.ys)

    def integral(self, D: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``int_0^u D`` per row for piecewise-constant ``D`` (shape ``(n, m)``); ``u`` is ``(n, q)``."""
        cum = np.concatenate([np.zeros((len(D), 1)), np.cumsum(D * self.lengths, axis=1)[:, :-1]], axis=1)
        u = np.minimum(u, self.horizon)
        idx = (self.T[:, None, :] <= u[:, :, None]).sum(axis=2) - 1
        idx = np.clip(idx, 0, D.shape[1] - 1)
        rows = np.arange(len(D))[:, None]
        return cum[rows, idx] + D[rows, idx] * (u - self.T[rows, idx])

    def shifts(self, model: ShiftModel) -> np.ndarray:
        n, m, d = self.S.shape
        return model.segment_shift(self.S.reshape(-1, d), self.names).reshape(n, m)

    def mimic(self, model: ShiftModel, times) -> np.ndarray:
        """``X(t)`` for every path and every ``t`` in ``times`` (shape ``(n, q)``)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any((times < 0) | (times > self.horizon)):
            raise DomainError("query time outside [0, horizon]")
        return self.mimic_at(model, np.broadcast_to(times[None, :], (len(self.ys), len(times))))

    def mimic_at(self, model: ShiftModel, times_per_row: np.ndarray) -> np.ndarray:
        """``X`` at a row-specific time matrix of shape ``(n, q)``."""
        D = self.shifts(model)
        u = np.asarray(times_per_row, dtype=float)
        y = self.ys[:, None]
        n = len(self.ys)
        stop = np.minimum(self.ys, self.horizon)[:, None] if model.survival else np.full((n, 1), self.horizon)
        lo = np.minimum(u, stop)
        X = y - (self.integral(D, stop) - self.integral(D, lo))
        if model.survival:
            X = np.where(u >= y, y, X)
        return X

    def subset(self, rows) -> "PathTable":
        out = object.__new__(PathTable)
        out.names, out.horizon = self.names, self.horizon
        out.T, out.S, out.ys = self.T[rows], self.S[rows], self.ys[rows]
        out.ends, out.lengths = self.ends[rows], self.lengths[rows]
        return out
