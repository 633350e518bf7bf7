"""Parametric infinitesimal shift functions.

A shift function ``D(y, t; path)`` is the rate at which the outcome quantile
of a patient moves when treatment is stopped an instant later. Each family
below maps a blip parameter ``psi`` and the current path state to that rate.

For survival outcomes every family is wrapped in the same guard. The shift
is zero once the patient has died or when ``y < t``. On the diagonal
``y == t`` it takes its limit from above.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ModelValidityWarning
from .paths import SamplePath

__all__ = [
    "FAMILIES",
    "OUTCOME_KINDS",
    "RegularityBudget",
    "ShiftModel",
    "shift",
    "survival_limit_at_diagonal",
    "gronwall_constant",
    "closed_form_mimic",
]

FAMILIES = ("GvHDMultiplicative", "PCPProphylaxis", "DelayedEffect", "UserTabulated")
OUTCOME_KINDS = ("Continuous", "Survival")

_PSI_DIM = {"GvHDMultiplicative": 1, "PCPProphylaxis": 3, "DelayedEffect": 1, "UserTabulated": 1}

_DEFAULT_COORDS = {
    "GvHDMultiplicative": {"treatment": "gvhd", "alive": "alive"},
    "PCPProphylaxis": {"treatment": "treated", "history": "pcp", "arm": "arm", "alive": "alive"},
    "DelayedEffect": {"treatment": "treated", "alive": "alive"},
    "UserTabulated": {"covariate": "bin", "alive": "alive"},
}


@dataclass(frozen=True)
class RegularityBudget:
    """Constants bounding a family of conditional distributions.

    ``eps`` is the density floor on ``[y1, y2]``. ``c1`` and ``c2`` bound the
    density and the time derivative of the CDF. ``l1`` and ``l2`` are their
    Lipschitz constants in ``y``.
    """

    eps: float
    c1: float
    c2: float
    l1: float
    l2: float
    y1: float
    y2: float

    def __post_init__(self):
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise DomainError(f"density floor eps must be positive and finite, got {self.eps}")
        for name in ("c1", "c2", "l1", "l2"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"budget constant {name} must be nonnegative and finite, got {v}")
        if not self.y1 < self.y2:
            raise DomainError(f"need y1 < y2, got [{self.y1}, {self.y2}]")

    def check_outcome(self, kind: str, horizon: float) -> None:
        """Survival outcomes need the support to reach past the horizon."""
        if kind == "Survival" and self.y2 < horizon:
            raise DomainError(f"survival budget needs y2 >= horizon ({self.y2} < {horizon})")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("eps", "c1", "c2", "l1", "l2", "y1", "y2")}


def gronwall_constant(budget: RegularityBudget) -> float:
    """Lipschitz constant in ``y`` of a quotient ``-dF/dh / dF/dy`` under ``budget``.

    >>> gronwall_constant(RegularityBudget(0.1, 1, 1, 1, 1, 0, 1))
    110.0
    """
    b = budget
    return b.l2 / b.eps + b.c2 * b.l1 / b.eps**2


@dataclass(frozen=True)
class ShiftModel:
    """A parametric shift function.

    Parameters
    ----------
    family : str
        One of :data:`FAMILIES`.
    psi : sequence of float
        Blip parameter; length 3 for ``PCPProphylaxis``, else 1.
    outcome_kind : str
        ``"Continuous"`` or ``"Survival"``.
    coords : mapping, optional
        Role to path-coordinate name, e.g. ``{"treatment": "gvhd"}``.
    budget : RegularityBudget, optional
    window : float
        ``DelayedEffect`` only: the effect vanishes when ``y - t > window``.
    table, y_grid, t_grid : array_like, optional
        ``UserTabulated`` only. ``table[b, i, j]`` is the shift for
        covariate bin ``b`` at ``(y_grid[i], t_grid[j])``.
    """

    family: str
    psi: tuple
    outcome_kind: str = "Survival"
    coords: Mapping[str, str] = field(default_factory=dict)
    budget: RegularityBudget | None = None
    window: float = 5.0
    table: np.ndarray | None = None
    y_grid: np.ndarray | None = None
    t_grid: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise DomainError(f"unknown outcome kind {self.outcome_kind!r}")
        psi = tuple(float(p) for p in np.atleast_1d(self.psi))
        if len(psi) != _PSI_DIM[self.family]:
            raise DomainError(f"{self.family} takes {_PSI_DIM[self.family]} parameter(s), got {len(psi)}")
        if not all(math.isfinite(p) for p in psi):
            raise DomainError("psi must be finite")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "coords", {**_DEFAULT_COORDS[self.family], **dict(self.coords)})
        if self.family == "UserTabulated":
            if self.table is None or self.y_grid is None or self.t_grid is None:
                raise DomainError("UserTabulated needs table, y_grid and t_grid")
            table = np.asarray(self.table, dtype=float)
            yg, tg = np.asarray(self.y_grid, float), np.asarray(self.t_grid, float)
            if table.ndim == 2:
                table = table[None]
            if table.shape[1:] != (len(yg), len(tg)):
                raise DomainError("table shape must be (bins, len(y_grid), len(t_grid))")
            if np.any(np.diff(yg) <= 0) or np.any(np.diff(tg) <= 0):
                raise DomainError("tabulation grids must be strictly increasing")
            object.__setattr__(self, "table", table)
            object.__setattr__(self, "y_grid", yg)
            object.__setattr__(self, "t_grid", tg)

    # -- construction helpers -------------------------------------------------

    def with_psi(self, psi) -> "ShiftModel":
        d = dict(self.__dict__)
        d["psi"] = psi
        return ShiftModel(**d)

    @property
    def survival(self) -> bool:
        return self.outcome_kind == "Survival"

    @property
    def y_independent(self) -> bool:
        """True when the shift is constant in ``y`` between jumps of the path."""
        return self.family in ("GvHDMultiplicative", "PCPProphylaxis")

    # -- evaluation -----------------------------------------------------------

    def switching(self) -> Callable[[float, float], float] | None:
        """Continuous function whose sign selects the smooth branch of ``D``.

        Only ``DelayedEffect`` jumps in ``y``: it is off where
        ``y - t - window > 0``. The solver integrates with the branch frozen
        (see ``bind(names, branch=...)``), locates the zero of this function
        and flips the branch there. Returns ``None`` for families that are
        smooth in ``y``.
        """
        if self.family == "DelayedEffect":
            w = self.window
            return lambda y, t: y - t - w
        return None

    def bind(self, names: Sequence[str], branch: bool | None = None) -> Callable[[float, float, np.ndarray], float]:
        """Fast evaluator ``f(y, t, state)`` for paths with coordinate ``names``.

        ``state`` is the path value at ``t``. The survival guard is applied,
        and ``y == t`` gives the limit from above. ``branch`` freezes the
        side of the switching surface for families that have one: ``True``
        is the side where the switching function is positive.
        """
        raw = self._raw(names, branch)
        if not self.survival:
            return lambda y, t, z: raw(y, t, z)
        alive = names.index(self.coords["alive"]) if self.coords["alive"] in names else None

        def guarded(y, t, z):
            if alive is not None and z[alive] == 0:
                return 0.0
            if y < t:
                return 0.0
            if y == t:
                return self._diagonal(raw, t, z)
            return raw(y, t, z)

        return guarded

    def _raw(self, names: Sequence[str], branch: bool | None = None):
        c = self.coords
        fam = self.family
        if fam == "GvHDMultiplicative":
            a = names.index(c["treatment"])
            rate = 1.0 - math.exp(self.psi[0])
            return lambda y, t, z: rate * z[a]
        if fam == "PCPProphylaxis":
            a, p, r = (names.index(c[k]) for k in ("treatment", "history", "arm"))
            p1, p2, p3 = self.psi
            return lambda y, t, z: (1.0 - math.exp(p1 + p2 * z[p] + p3 * z[r])) * z[a]
        if fam == "DelayedEffect":
            a = names.index(c["treatment"])
            rate = 1.0 - math.exp(self.psi[0])
            w = self.window
            if branch is not None:
                return lambda y, t, z: 0.0 if branch else rate * z[a]
            return lambda y, t, z: 0.0 if y - t > w else rate * z[a]
        b = names.index(c["covariate"])
        scale = self.psi[0]
        return lambda y, t, z: scale * self._interp(y, t, int(z[b]))

    def _interp(self, y: float, t: float, b: int) -> float:
        tab = self.table[min(max(b, 0), self.table.shape[0] - 1)]
        yg, tg = self.y_grid, self.t_grid
        y = min(max(y, yg[0]), yg[-1])
        t = min(max(t, tg[0]), tg[-1])
        i = min(max(int(np.searchsorted(yg, y, side="right")) - 1, 0), len(yg) - 2)
        j = min(max(int(np.searchsorted(tg, t, side="right")) - 1, 0), len(tg) - 2)
        u = (y - yg[i]) / (yg[i + 1] - yg[i])
        v = (t - tg[j]) / (tg[j + 1] - tg[j])
        return float(
            (1 - u) * (1 - v) * tab[i, j] + u * (1 - v) * tab[i + 1, j] + (1 - u) * v * tab[i, j + 1] + u * v * tab[i + 1, j + 1]
        )

    def _diagonal(self, raw, t, z) -> float:
        if self.family == "UserTabulated":
            val = _richardson_limit(lambda d: raw(t + d, t, z))
        else:
            # every other family is constant in y near the diagonal
            val = raw(t, t, z)
        if val > 1.0 + 1e-12:
            warnings.warn(
                f"shift on the diagonal is {val:.6g} > 1 at t={t}; trajectories may cross below t",
                ModelValidityWarning,
                stacklevel=3,
            )
        return val

    def segment_shift(self, states: np.ndarray, names: Sequence[str]) -> np.ndarray:
        """Vectorized shift for rows of path states (``y``-independent families only)."""
        if not self.y_independent:
            raise DomainError(f"{self.family} depends on y; use the ODE solver")
        states = np.asarray(states, dtype=float)
        c = self.coords
        a = states[:, names.index(c["treatment"])]
        if self.family == "GvHDMultiplicative":
            d = (1.0 - math.exp(self.psi[0])) * a
        else:
            p = states[:, names.index(c["history"])]
            r = states[:, names.index(c["arm"])]
            p1, p2, p3 = self.psi
            d = (1.0 - np.exp(p1 + p2 * p + p3 * r)) * a
        if self.survival and c["alive"] in names:
            d = d * (states[:, names.index(c["alive"])] != 0)
        return d

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "psi": list(self.psi),
            "outcome_kind": self.outcome_kind,
            "coords": dict(self.coords),
            "budget": self.budget.to_dict() if self.budget else None,
        }
        if self.family == "DelayedEffect":
            d["window"] = self.window
        if self.family == "UserTabulated":
            d["table"] = self.table.tolist()
            d["y_grid"] = self.y_grid.tolist()
            d["t_grid"] = self.t_grid.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShiftModel":
        d = dict(d)
        missing = {"family", "psi"} - d.keys()
        if missing:
            raise DomainError(f"model spec lacks {sorted(missing)}")
        budget = d.pop("budget", None)
        if budget is not None:
            budget = RegularityBudget(**budget)
        return cls(budget=budget, **d)

    @classmethod
    def from_json(cls, text: str) -> "ShiftModel":
        return cls.from_dict(json.loads(text))


def _richardson_limit(g: Callable[[float], float], jmin: int = 10, jmax: int = 20) -> float:
    """Limit of ``g(d)`` as ``d -> 0+`` from offsets ``2**-j`` by Richardson extrapolation."""
    col = [g(2.0**-j) for j in range(jmin, jmax + 1)]
    # Neville tableau for the extrapolation to d = 0, halving steps, linear error term first
    best = col[-1]
    factor = 2.0
    for _ in range(3):
        col = [(factor * col[i + 1] - col[i]) / (factor - 1.0) for i in range(len(col) - 1)]
        best = col[-1]
        factor *= 2.0
    return float(best)


def shift(model: ShiftModel, y: float, t: float, path: SamplePath) -> float:
    """Evaluate ``D(y, t; path)``."""
    if not (0.0 <= t <= path.horizon):
        raise DomainError(f"time {t} outside [0, {path.horizon}]")
    return model.bind(path.names)(float(y), float(t), path.value_at(t))


def survival_limit_at_diagonal(model: ShiftModel, t: float, path: SamplePath) -> float:
    """``lim_{y -> t+} D(y, t; path)`` for a patient alive at ``t``.

    Closed form for families that are constant in ``y``; otherwise the limit
    is extrapolated from offsets ``2**-j``, ``j = 10..20``. Warns with
    :class:`ModelValidityWarning` when the limit exceeds 1, since then the
    backward trajectory can fall below the diagonal.
    """
    z = path.value_at(t)
    raw = model._raw(path.names)
    return model._diagonal(raw, float(t), z)


def closed_form_mimic(model: ShiftModel, path: SamplePath, y: float, t: float) -> float:
    """Exact backward solution at ``t`` for ``y``-independent families.

    Survival: ``X(t) = t + int_t^y exp(eta(s)) ds`` for ``t < y`` (with the
    path frozen at baseline after the horizon) and ``X(t) = y`` otherwise.
    Here ``eta(s)`` is the log time-scale factor while treated. Continuous:
    ``X(t) = y - int_t^tau D(s) ds``.
    """
    if not model.y_independent:
        raise DomainError(f"no closed form for {model.family}")
    tau = path.horizon
    if not (0.0 <= t <= tau):
        raise DomainError(f"time {t} outside [0, {tau}]")
    eta = _log_scale(model, path)
    edges = np.append(path.times, np.inf)
    if model.survival:
        if t >= y:
            return float(y)
        total = 0.0
        for k in range(len(path.times)):
            lo, hi = max(edges[k], t), min(edges[k + 1], y)
            if hi > lo:
                hi_in = min(hi, tau)
                total += math.exp(eta[k]) * max(hi_in - lo, 0.0) + max(hi - max(lo, tau), 0.0)
        return float(t + total)
    total = 0.0
    for k in range(len(path.times)):
        lo, hi = max(edges[k], t), min(edges[k + 1], tau)
        if hi > lo:
            total += (1.0 - math.exp(eta[k])) * (hi - lo)
    return float(y - total)


def _log_scale(model: ShiftModel, path: SamplePath) -> np.ndarray:
    c = model.coords
    v = path.values
    a = v[:, path.index(c["treatment"])]
    if model.family == "GvHDMultiplicative":
        return model.psi[0] * a
    p1, p2, p3 = model.psi
    return (p1 + p2 * v[:, path.index(c["history"])] + p3 * v[:, path.index(c["arm"])]) * a
