"""Discrete-time mimicking by composing conditional quantile maps.

On a grid ``0 = tau_0 < ... < tau_K = tau`` the model for interval ``k`` is
the conditional CDF ``F_k(y, t)`` of the outcome when treatment follows
the observed history up to ``t`` and stops afterwards. It is conditioned
on the discretized history at ``tau_k`` and used for ``t`` in
``[tau_k, tau_{k+1}]``. The mimicking value is read backwards::

    X(t) = F_k^{-1}(F_k(X(tau_{k+1}), tau_{k+1}), t),   X(tau) = Y.

The matching discrete-time shift is the mixture quotient
``-sum w dF/dt / sum w dF/dy`` over the members of a stratum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError, RegularityError
from .mimic_ode import Trajectory, gronwall_gap_bound
from .paths import SamplePath, discretize

__all__ = [
    "ConditionalModel",
    "GaussianLocationScale",
    "ExponentialSurvival",
    "UniformInterval",
    "TabulatedLocation",
    "Mixture",
    "compose_quantile_maps",
    "dn_shift",
    "mimic_trajectory",
    "ConvergenceResult",
    "convergence_study",
    "GaussianStartScenario",
    "TwoStageGaussian",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT2PI


class ConditionalModel:
    """Conditional outcome law indexed by the stopping time ``t``.

    Subclasses implement ``cdf``, ``pdf`` (derivative in ``y``) and
    ``dcdf_dt`` (derivative in ``t``). ``ppf`` defaults to bisection run
    until the bracket holds adjacent floats. All methods broadcast over ``y`` and ``t``.
    """

    def cdf(self, y, t):
        raise NotImplementedError

    def pdf(self, y, t):
        raise NotImplementedError

    def dcdf_dt(self, y, t):
        raise NotImplementedError

    def bracket(self, t) -> tuple[float, float]:
        """Interval containing every quantile strictly between 0 and 1."""
        return -1e6, 1e6

    def ppf(self, p, t):
        """Generalized inverse ``inf{y : F(y, t) >= p}`` by bisection."""
        p, t = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(t, dtype=float))
        if np.any((p < 0) | (p > 1)):
            raise DomainError("probability outside [0, 1]")
        lo_b, hi_b = self.bracket(t)
        lo = np.broadcast_to(np.asarray(lo_b, dtype=float), p.shape).copy()
        hi = np.broadcast_to(np.asarray(hi_b, dtype=float), p.shape).copy()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.all((mid <= lo) | (mid >= hi)):
                break  # adjacent floats: converged to full precision
            below = self.cdf(mid, t) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi if hi.ndim else float(hi)

    def shift(self, y, t):
        """Quotient ``-dF/dt / dF/dy``."""
        return -np.asarray(self.dcdf_dt(y, t)) / np.asarray(self.pdf(y, t))


@dataclass
class GaussianLocationScale(ConditionalModel):
    """``N(mean(t), sd(t)**2)``; callables must broadcast over arrays."""

    mean: Callable
    dmean: Callable
    sd: Callable = lambda t: np.ones_like(np.asarray(t, dtype=float))
    dsd: Callable = lambda t: np.zeros_like(np.asarray(t, dtype=float))

    def _z(self, y, t):
        return (np.asarray(y, dtype=float) - self.mean(t)) / self.sd(t)

    def cdf(self, y, t):
        return ndtr(self._z(y, t))

    def pdf(self, y, t):
        return _phi(self._z(y, t)) / self.sd(t)

    def dcdf_dt(self, y, t):
        z = self._z(y, t)
        return -_phi(z) * (self.dmean(t) + z * self.dsd(t)) / self.sd(t)

    def ppf(self, p, t):
        return self.mean(t) + self.sd(t) * ndtri(np.asarray(p, dtype=float))


@dataclass
class ExponentialSurvival(ConditionalModel):
    """Exponential survival from ``start`` with piecewise-constant hazard multipliers.

    Before the stopping time ``t`` the hazard is ``rate * m(s)``, where
    ``m = multipliers[j]`` on ``[breaks[j], breaks[j+1])``. After ``t`` the
    hazard is ``rate`` (treatment stopped). ``breaks[0]`` must equal ``start``.
    """

    start: float
    rate: float
    breaks: Sequence[float] = (0.0,)
    multipliers: Sequence[float] = (1.0,)

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, dtype=float)
        self.multipliers = np.asarray(self.multipliers, dtype=float)
        if len(self.breaks) != len(self.multipliers) or self.breaks[0] != self.start:
            raise DomainError("need one multiplier per break, starting at start")
        if self.rate <= 0 or np.any(self.multipliers <= 0):
            raise DomainError("rates must be positive")

    def _m(self, s):
        j = np.searchsorted(self.breaks, s, side="right") - 1
        return self.multipliers[np.clip(j, 0, len(self.multipliers) - 1)]

    def _cum_m(self, s):
        # int_start^s m(u) du for s >= start
        b, m = self.breaks, self.multipliers
        knots = np.concatenate([[0.0], np.cumsum(m[:-1] * np.diff(b))])
        s = np.asarray(s, dtype=float)
        j = np.clip(np.searchsorted(b, s, side="right") - 1, 0, len(m) - 1)
        return knots[j] + m[j] * (s - b[j])

    def _hazard(self, y, t):
        y, t = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(t, dtype=float))
        yy = np.maximum(y, self.start)
        first = self._cum_m(np.minimum(yy, t))
        return self.rate * (first + np.maximum(yy - t, 0.0)), y, t

    def cdf(self, y, t):
        H, y, _ = self._hazard(y, t)
        return np.where(y < self.start, 0.0, -np.expm1(-H))

    def pdf(self, y, t):
        H, y, t = self._hazard(y, t)
        h = self.rate * np.where(y < t, self._m(y), 1.0)
        return np.where(y < self.start, 0.0, h * np.exp(-H))

    def dcdf_dt(self, y, t):
        H, y, t = self._hazard(y, t)
        return np.where(y > t, np.exp(-H) * self.rate * (self._m(t) - 1.0), 0.0)

    def ppf(self, p, t):
        p, t = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(t, dtype=float))
        target = -np.log1p(-np.minimum(p, 1.0)) / self.rate
        at_t = self._cum_m(np.maximum(t, self.start))
        # invert the piecewise-linear cumulative multiplier before t, slope 1 after t
        b, m = self.breaks, self.multipliers
        knots = np.concatenate([[0.0], np.cumsum(m[:-1] * np.diff(b))])
        j = np.clip(np.searchsorted(knots, target, side="right") - 1, 0, len(m) - 1)
        before = b[j] + (target - knots[j]) / m[j]
        after = np.maximum(t, self.start) + (target - at_t)
        out = np.where(target <= at_t, before, after)
        return out if out.ndim else float(out)

    def bracket(self, t):
        return self.start, self.start + 1e6


@dataclass
class UniformInterval(ConditionalModel):
    """Uniform on ``[lo(t), hi(t)]`` with derivative callables ``dlo``, ``dhi``."""

    lo: Callable
    hi: Callable
    dlo: Callable
    dhi: Callable

    def cdf(self, y, t):
        a, b = self.lo(t), self.hi(t)
        return np.clip((np.asarray(y, dtype=float) - a) / (b - a), 0.0, 1.0)

    def pdf(self, y, t):
        a, b = self.lo(t), self.hi(t)
        y = np.asarray(y, dtype=float)
        return np.where((y >= a) & (y <= b), 1.0 / (b - a), 0.0)

    def dcdf_dt(self, y, t):
        a, b = self.lo(t), self.hi(t)
        da, db = self.dlo(t), self.dhi(t)
        y = np.asarray(y, dtype=float)
        inside = (y > a) & (y < b)
        return np.where(inside, (-da * (b - a) - (y - a) * (db - da)) / (b - a) ** 2, 0.0)

    def ppf(self, p, t):
        a, b = self.lo(t), self.hi(t)
        return a + np.asarray(p, dtype=float) * (b - a)


class TabulatedLocation(ConditionalModel):
    """Location family ``G(y - mu(t))`` with a base law given by its density on a grid.

    The density is integrated with the trapezoid rule. Between grid points
    the CDF is interpolated linearly and the density is read from the grid.
    """

    def __init__(self, grid, density, mu: Callable, dmu: Callable):
        grid = np.asarray(grid, dtype=float)
        dens = np.asarray(density, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        self.grid, self.dens, self.cum = grid, dens / cum[-1], cum / cum[-1]
        self.mu, self.dmu = mu, dmu

    def cdf(self, y, t):
        return np.interp(np.asarray(y, dtype=float) - self.mu(t), self.grid, self.cum)

    def pdf(self, y, t):
        return np.interp(np.asarray(y, dtype=float) - self.mu(t), self.grid, self.dens, left=0.0, right=0.0)

    def dcdf_dt(self, y, t):
        return -self.pdf(y, t) * self.dmu(t)

    def ppf(self, p, t):
        # strip flat stretches so the inverse interpolation is well defined
        keep = np.concatenate([[True], np.diff(self.cum) > 0])
        return np.interp(np.asarray(p, dtype=float), self.cum[keep], self.grid[keep]) + self.mu(t)


class Mixture(ConditionalModel):
    """Finite mixture; weights are normalized on construction."""

    def __init__(self, components: Sequence[ConditionalModel], weights: Sequence[float]):
        w = np.asarray(weights, dtype=float)
        if len(components) == 0 or len(w) != len(components):
            raise DomainError("need one weight per component")
        if np.any(w < 0) or w.sum() <= 0:
            raise DomainError("weights must be nonnegative with positive total")
        self.components = list(components)
        self.weights = w / w.sum()

    def _sum(self, attr, y, t):
        return sum(w * getattr(c, attr)(y, t) for c, w in zip(self.components, self.weights) if w > 0)

    def cdf(self, y, t):
        return self._sum("cdf", y, t)

    def pdf(self, y, t):
        return self._sum("pdf", y, t)

    def dcdf_dt(self, y, t):
        return self._sum("dcdf_dt", y, t)

    def bracket(self, t):
        ends = [c.bracket(t) for c in self.components]
        qs = [(c.ppf(1e-15, t), c.ppf(1 - 1e-15, t)) for c in self.components]
        lo = min(np.min(q[0]) for q in qs) - 1.0
        hi = max(np.max(q[1]) for q in qs) + 1.0
        return max(lo, min(e[0] for e in ends)), min(hi, max(e[1] for e in ends))


def _grid_index(grid: np.ndarray, t: float) -> int:
    k = int(np.searchsorted(grid, t, side="right")) - 1
    return min(max(k, 0), len(grid) - 2)


def compose_quantile_maps(
    models: Sequence[ConditionalModel],
    grid: Sequence[float],
    y_final: float,
    t,
    kind: str = "Continuous",
):
    """Backward composition of conditional quantile maps.

    ``models[k]`` is the law for interval ``[grid[k], grid[k + 1]]``. For
    survival outcomes the chain starts on the interval where ``y_final``
    falls, so ``X(t) = y_final`` from the next grid point on. ``X(t)`` also
    equals ``y_final`` whenever ``t >= y_final``.
    """
    grid = np.asarray(grid, dtype=float)
    K = len(grid) - 1
    if len(models) != K or K < 1:
        raise DomainError("need one model per grid interval")
    if np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any((t_arr < grid[0]) | (t_arr > grid[-1])):
        raise DomainError("time outside the grid")
    y = float(y_final)
    last = K - 1
    if kind == "Survival" and y < grid[-1]:
        last = _grid_index(grid, y) if y > grid[0] else 0
    # value of the chain at every grid point from grid[last + 1] down
    at_grid = {last + 1: y}
    x = y
    for k in range(last, -1, -1):
        x = float(models[k].ppf(models[k].cdf(x, grid[k + 1]), grid[k]))
        at_grid[k] = x
    out = np.empty_like(t_arr)
    ks = np.clip(np.searchsorted(grid, t_arr, side="right") - 1, 0, K - 1)
    for k in np.unique(ks):
        sel = ks == k
        if k > last:
            out[sel] = y
            continue
        p = models[k].cdf(at_grid[k + 1], grid[k + 1])
        out[sel] = models[k].ppf(np.full(sel.sum(), p), t_arr[sel])
    if kind == "Survival":
        out = np.where(t_arr >= y, y, out)
    return out if np.ndim(t) else float(out[0])


def dn_shift(
    members: Sequence[tuple[float, ConditionalModel]],
    y: float,
    t: float,
    kind: str = "Continuous",
    alive: Sequence[bool] | None = None,
    eps: float = 1e-12,
) -> float:
    """Mixture quotient ``-sum w dF/dt / sum w dF/dy`` over stratum members.

    Weights must be nonnegative and sum to one. For survival outcomes only
    members alive at ``t`` contribute, and the shift is zero when none is
    or when ``y < t``. Raises :class:`RegularityError` when the
    denominator is below ``eps``.
    """
    w = np.array([m[0] for m in members], dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError("stratum weights must be nonnegative and sum to 1")
    if kind == "Survival":
        if y < t:
            return 0.0
        if alive is not None:
            w = w * np.asarray(alive, dtype=float)
        if w.sum() == 0:
            return 0.0
    num = sum(wi * float(m.dcdf_dt(y, t)) for wi, (_, m) in zip(w, members) if wi > 0)
    den = sum(wi * float(m.pdf(y, t)) for wi, (_, m) in zip(w, members) if wi > 0)
    if den < eps:
        raise RegularityError(f"mixture density {den:.3g} below floor {eps:.3g} at y={y}, t={t}")
    return -num / den


def mimic_trajectory(models, grid, y_final, mesh, kind: str = "Continuous") -> Trajectory:
    """:func:`compose_quantile_maps` on a mesh, packaged as a :class:`Trajectory`."""
    mesh = np.asarray(mesh, dtype=float)
    vals = np.asarray(compose_quantile_maps(models, grid, y_final, mesh, kind), dtype=float)
    return Trajectory(mesh, vals, float(y_final), kind, {"route": "quantile-composition", "intervals": len(grid) - 1})


@dataclass
class ConvergenceResult:
    levels: list[int]
    gaps: list[float]
    bounds: list[float]
    reference: str
    mesh_size: int

    @property
    def nonincreasing(self) -> bool:
        return all(b <= 1.05 * a for a, b in zip(self.gaps, self.gaps[1:]))

    def rows(self):
        return [(lvl, gap, bnd) for lvl, gap, bnd in zip(self.levels, self.gaps, self.bounds)]


def convergence_study(
    scenario,
    path: SamplePath,
    y_final: float,
    levels: Sequence[int],
    mesh_level: int = 12,
) -> ConvergenceResult:
    """Sup-norm distance between level-``n`` and reference mimicking processes.

    ``scenario`` supplies ``stratum_models(path, level)``, ``kind`` and
    ``horizon``. When it also supplies ``reference(path, y, mesh)``,
    ``true_shift(y, t, path)`` and ``lipschitz``, the reference is analytic
    and each level gets a Grönwall bound along its own trajectory.
    Otherwise the reference is level ``max(levels) + 4`` and the bounds are NaN.
    """
    levels = sorted(int(v) for v in levels)
    if not levels or levels[0] < 1:
        raise DomainError("levels must be positive integers")
    tau = scenario.horizon
    mesh = np.union1d(tau * np.arange(2**mesh_level + 1) / 2**mesh_level, path.times)
    analytic = hasattr(scenario, "reference")
    if analytic:
        ref = np.asarray(scenario.reference(path, y_final, mesh), dtype=float)
        label = "analytic"
    else:
        top = levels[-1] + 4
        ref_models = scenario.stratum_models(path, top)
        ref = compose_quantile_maps(ref_models, _grid(tau, top), y_final, mesh, scenario.kind)
        label = f"level {top}"
    gaps, bounds = [], []
    for n in levels:
        models = scenario.stratum_models(path, n)
        grid = _grid(tau, n)
        traj = mimic_trajectory(models, grid, y_final, mesh, scenario.kind)
        gaps.append(float(np.max(np.abs(traj.values - ref))))
        if analytic and hasattr(scenario, "true_shift"):

            def gap(x, s, models=models, grid=grid):
                x, s = np.broadcast_arrays(np.asarray(x, float), np.asarray(s, float))
                out = np.empty(x.shape)
                ks = np.clip(np.searchsorted(grid, s, side="right") - 1, 0, len(grid) - 2)
                for k in np.unique(ks):
                    sel = ks == k
                    dn = models[k].shift(x[sel], s[sel])
                    out[sel] = scenario.true_shift(x[sel], s[sel], path) - dn
                return out

            bounds.append(gronwall_gap_bound(traj, gap, lipschitz=scenario.lipschitz))
        else:
            bounds.append(math.nan)
    return ConvergenceResult(levels, gaps, bounds, label, len(mesh))


def _grid(tau: float, level: int) -> np.ndarray:
    return tau * np.arange(2**level + 1) / 2**level


# -- scenarios with known conditional laws ------------------------------------


class _NotStarted(ConditionalModel):
    """Law of ``Y^(t)`` given that treatment has not started by ``t0``.

    Treatment starts at ``T ~ t0 + Exp(rate)`` and adds ``psi`` per unit
    time from then on. The baseline outcome is ``N(m0, sd**2)``.
    """

    def __init__(self, t0, m0, sd, psi, rate, nodes, weights):
        self.t0, self.m0, self.sd, self.psi, self.rate = t0, m0, sd, psi, rate
        self.x, self.w = nodes, weights

    def _parts(self, y, t):
        y, t = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(t, dtype=float))
        span = t - self.t0
        s = self.t0 + span[..., None] * self.x  # quadrature nodes on [t0, t]
        dens = self.rate * np.exp(-self.rate * (s - self.t0)) * span[..., None] * self.w
        z = (y[..., None] - self.m0 - self.psi * (t[..., None] - s)) / self.sd
        z0 = (y - self.m0) / self.sd
        stay = np.exp(-self.rate * span)
        return z, z0, dens, stay

    def cdf(self, y, t):
        z, z0, dens, stay = self._parts(y, t)
        return stay * ndtr(z0) + np.sum(dens * ndtr(z), axis=-1)

    def pdf(self, y, t):
        z, z0, dens, stay = self._parts(y, t)
        return (stay * _phi(z0) + np.sum(dens * _phi(z), axis=-1)) / self.sd

    def dcdf_dt(self, y, t):
        # boundary terms of the Leibniz rule cancel; only the moving mean remains
        z, _, dens, _ = self._parts(y, t)
        return -self.psi / self.sd * np.sum(dens * _phi(z), axis=-1)

    def bracket(self, t):
        lo = self.m0 - 40 * self.sd - abs(self.psi) * 2 * (np.max(t) + 1)
        return lo, -lo + 2 * self.m0


class _StartedWithin(ConditionalModel):
    """Law of ``Y^(t)`` given that treatment started in ``(a, b]`` (``t >= b``)."""

    def __init__(self, a, b, m0, sd, psi, rate, nodes, weights):
        if b > a:
            s = a + (b - a) * nodes
            w = weights * np.exp(-rate * (s - a))
        else:
            s, w = np.array([a]), np.array([1.0])
        self.s, self.w = s, w / w.sum()
        self.m0, self.sd, self.psi = m0, sd, psi

    def _z(self, y, t):
        y, t = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(t, dtype=float))
        return (y[..., None] - self.m0 - self.psi * (t[..., None] - self.s)) / self.sd

    def cdf(self, y, t):
        return np.sum(self.w * ndtr(self._z(y, t)), axis=-1)

    def pdf(self, y, t):
        return np.sum(self.w * _phi(self._z(y, t)), axis=-1) / self.sd

    def dcdf_dt(self, y, t):
        return -self.psi / self.sd * np.sum(self.w * _phi(self._z(y, t)), axis=-1)

    def bracket(self, t):
        lo = self.m0 - 40 * self.sd - abs(self.psi) * 2 * (np.max(t) + 1)
        return lo, -lo + 2 * self.m0


@dataclass
class GaussianStartScenario:
    """Continuous outcome with a single treatment start time.

    Treatment starts at ``T ~ Exp(rate)`` and stays on. Each unit of
    treated time adds ``psi`` to the outcome, and the baseline outcome is
    ``N(m0, sd**2)`` independent of ``T``. The shift function is
    ``psi * A(t)``, which is constant in ``y``, so its Lipschitz constant
    is zero. The conditional laws on a dyadic grid are mixtures over the
    start time within the observed bin. They are evaluated by
    Gauss-Legendre quadrature.
    """

    psi: float = 1.0
    rate: float = 1.0
    m0: float = 0.0
    sd: float = 1.0
    horizon: float = 1.0
    n_nodes: int = 24
    kind: str = "Continuous"
    lipschitz: float = 0.0
    names: tuple = ("treated",)
    _nodes: tuple = field(init=False, repr=False, default=())

    def __post_init__(self):
        x, w = np.polynomial.legendre.leggauss(self.n_nodes)
        self._nodes = ((x + 1) / 2, w / 2)

    def path(self, start: float) -> SamplePath:
        if start < self.horizon:
            return SamplePath(self.horizon, [0.0, start], [[0.0], [1.0]], self.names)
        return SamplePath(self.horizon, [0.0], [[0.0]], self.names)

    def simulate(self, n: int, rng: np.random.Generator):
        start = rng.exponential(1 / self.rate, n)
        u = rng.normal(self.m0, self.sd, n)
        y = u + self.psi * np.clip(self.horizon - start, 0.0, None)
        return [self.path(s) for s in start], y

    def true_shift(self, y, t, path):
        t = np.asarray(t, dtype=float)
        start = path.first_time("treated", 1.0)
        return self.psi * (t >= start) + 0.0 * np.asarray(y, dtype=float)

    def reference(self, path, y, t):
        start = path.first_time("treated", 1.0)
        t = np.asarray(t, dtype=float)
        return y - self.psi * np.clip(self.horizon - np.maximum(t, start), 0.0, None)

    def stratum_models(self, path: SamplePath, level: int) -> list[ConditionalModel]:
        """One conditional model per level-``level`` grid interval, for this path's strata."""
        disc = discretize(path, level)
        grid = disc.grid
        on = disc.bins[:, 0] > 0
        x, w = self._nodes
        models: list[ConditionalModel] = []
        for k in range(len(grid) - 1):
            if not on[k]:
                models.append(_NotStarted(grid[k], self.m0, self.sd, self.psi, self.rate, x, w))
            else:
                j = int(np.argmax(on))
                a = grid[j - 1] if j > 0 else grid[0]
                models.append(_StartedWithin(a, grid[j], self.m0, self.sd, self.psi, self.rate, x, w))
        return models


@dataclass
class TwoStageGaussian:
    """Two decision times with a confounder, for checking backward induction in discrete time.

    ``U ~ N(0, 1)`` is the untreated outcome. ``A0`` is a fair coin at time
    0. At ``tau / 2`` a binary covariate ``L1`` follows a probit model in
    ``U`` and ``A0``, and then ``A1`` follows a logistic model in ``L1``.
    Treatment adds ``psi`` per unit of treated time. When ``shuffle`` is
    set, the final outcome uses a fresh uniform instead of ``U``'s rank.
    That keeps every conditional law but breaks rank preservation
    (experimental).
    """

    psi: float = 1.0
    probit: tuple = (0.0, 1.5, -0.5)
    logit: tuple = (-0.5, 1.5)
    horizon: float = 1.0
    shuffle: bool = False

    @property
    def grid(self):
        return np.array([0.0, self.horizon / 2, self.horizon])

    def _u_law(self, a0: int, l1: int) -> TabulatedLocation:
        a, b, c = self.probit
        u = np.linspace(-9.0, 9.0, 36001)
        p1 = ndtr(a + b * u + c * a0)
        dens = _phi(u) * (p1 if l1 else 1.0 - p1)
        return TabulatedLocation(u, dens, lambda t: 0.0 * np.asarray(t, float), lambda t: 0.0 * np.asarray(t, float))

    def models(self, a0: int, l1: int, a1: int) -> list[ConditionalModel]:
        psi, half = self.psi, self.horizon / 2
        m0 = GaussianLocationScale(lambda t: psi * a0 * np.asarray(t, float), lambda t: psi * a0 + 0.0 * np.asarray(t, float))
        base = self._u_law(a0, l1)
        m1 = TabulatedLocation(
            base.grid * 1.0,
            base.dens,
            lambda t: psi * (half * a0 + (np.asarray(t, float) - half) * a1),
            lambda t: psi * a1 + 0.0 * np.asarray(t, float),
        )
        return [m0, m1]

    def simulate(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Observed data plus the counterfactuals ``Y^(0)`` and ``Y^(tau/2)``."""
        a, b, c = self.probit
        g0, g1 = self.logit
        half = self.horizon / 2
        u = rng.standard_normal(n)
        a0 = (rng.random(n) < 0.5).astype(int)
        l1 = (rng.random(n) < ndtr(a + b * u + c * a0)).astype(int)
        a1 = (rng.random(n) < 1 / (1 + np.exp(-(g0 + g1 * l1)))).astype(int)
        v = rng.random(n)
        y_half = u + self.psi * half * a0
        if self.shuffle:
            fresh = np.empty(n)
            for i in (0, 1):
                for j in (0, 1):
                    sel = (a0 == i) & (l1 == j)
                    fresh[sel] = self._u_law(i, j).ppf(v[sel], 0.0)
            y = fresh + self.psi * half * (a0 + a1)
        else:
            y = y_half + self.psi * half * a1
        return {"a0": a0, "l1": l1, "a1": a1, "y": y, "y_cf0": u, "y_cf_half": y_half}
