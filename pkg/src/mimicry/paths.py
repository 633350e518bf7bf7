"""Piecewise-constant covariate and treatment paths.

A :class:`SamplePath` is a right-continuous, piecewise-constant vector process
on ``[0, horizon]``. It is stored as the value at time zero followed by the
jumps. Paths can be read at any time, listed by jump time, and coarsened to
a dyadic grid, where each coordinate is binned into half-open bins of
width ``2**-level``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "SamplePath",
    "DiscretizedPath",
    "dyadic_grid",
    "value_at",
    "jump_times",
    "discretize",
    "write_paths_csv",
    "read_paths_csv",
]


@dataclass(frozen=True)
class SamplePath:
    """Right-continuous piecewise-constant path.

    Parameters
    ----------
    horizon : float
        End of the observation window ``tau``.
    times : array_like
        Strictly increasing change points. The first entry must be ``0``.
        Later entries are jump times in ``(0, horizon]``.
    values : array_like
        Array of shape ``(len(times), dim)``. Row ``i`` is the value on
        ``[times[i], times[i + 1])``.
    names : sequence of str, optional
        Coordinate names. Defaults to ``z0, z1, ...``.
    """

    horizon: float
    times: np.ndarray
    values: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1) if len(times) else values
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise DomainError(f"horizon must be positive and finite, got {self.horizon}")
        if len(times) == 0 or times[0] != 0.0:
            raise DomainError("a path must start with its value at time 0")
        if values.shape[0] != len(times):
            raise DomainError("values must have one row per change point")
        if np.any(np.diff(times) < 0):
            raise DomainError("change points must be nondecreasing")
        if times[-1] > self.horizon:
            raise DomainError("jump after the horizon")
        times, values = _merge_coincident(times, values)
        names = tuple(self.names) or tuple(f"z{i}" for i in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise DomainError("one name per coordinate is required")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def jumps(self) -> list[tuple[float, np.ndarray]]:
        """Jump list as ``(time, new value)`` pairs, excluding time zero."""
        return [(float(t), self.values[i]) for i, t in enumerate(self.times) if i > 0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"path has no coordinate {name!r}; known: {self.names}") from None

    def value_at(self, t: float) -> np.ndarray:
        return value_at(self, t)

    def left_limit(self, t: float) -> np.ndarray:
        """Value just before ``t`` (equal to the value at 0 when ``t == 0``)."""
        _check_time(self, t)
        i = int(np.searchsorted(self.times, t, side="left")) - 1
        return self.values[max(i, 0)]

    def coordinate(self, name: str, t: float) -> float:
        return float(value_at(self, t)[self.index(name)])

    def first_time(self, name: str, value: float) -> float:
        """First time the coordinate equals ``value``; ``inf`` if never."""
        hits = np.flatnonzero(self.values[:, self.index(name)] == value)
        return float(self.times[hits[0]]) if len(hits) else math.inf


def _merge_coincident(times, values):
    # several jumps at one instant collapse to the last recorded value
    keep = np.ones(len(times), dtype=bool)
    keep[:-1] = times[1:] != times[:-1]
    times, values = times[keep].copy(), values[keep].copy()
    # drop "jumps" that do not change the value
    change = np.ones(len(times), dtype=bool)
    change[1:] = np.any(values[1:] != values[:-1], axis=1)
    return times[change], values[change]


def _check_time(path: SamplePath, t: float) -> None:
    if not (0.0 <= t <= path.horizon):
        raise DomainError(f"time {t} outside [0, {path.horizon}]")


def value_at(path: SamplePath, t: float) -> np.ndarray:
    """Right-continuous value of ``path`` at time ``t``."""
    _check_time(path, t)
    i = int(np.searchsorted(path.times, t, side="right")) - 1
    return path.values[i]


def jump_times(path: SamplePath) -> np.ndarray:
    """Sorted jump times in ``(0, horizon]``; coincident jumps appear once."""
    return path.times[1:].copy()


def dyadic_grid(horizon: float, level: int, forced: Iterable[float] = ()) -> np.ndarray:
    """Grid ``horizon * k / 2**level`` for ``k = 0..2**level``, plus forced times."""
    if int(level) != level or level < 1:
        raise DomainError(f"level must be an integer >= 1, got {level}")
    grid = horizon * np.arange(2**level + 1) / 2**level
    forced = np.asarray(list(forced), dtype=float)
    if forced.size:
        if np.any((forced < 0) | (forced > horizon)):
            raise DomainError("forced grid times must lie in [0, horizon]")
        grid = np.union1d(grid, forced)
    return grid


@dataclass(frozen=True)
class DiscretizedPath:
    """A path read on a grid, with each coordinate replaced by its bin index.

    ``bins[k, j]`` is ``floor(value_j(grid[k]) * 2**level)``. Bin ``i``
    covers ``[i / 2**level, (i + 1) / 2**level)``. Negative indices are
    allowed.
    """

    level: int
    grid: np.ndarray
    bins: np.ndarray

    def prefix(self, k: int) -> tuple[int, ...]:
        """Stratum key of the discretized history up to grid index ``k``."""
        return tuple(int(b) for b in self.bins[: k + 1].reshape(-1))

    def interval_index(self, t: float) -> int:
        """Index ``k`` with ``grid[k] <= t < grid[k + 1]`` (last interval is closed)."""
        if not (self.grid[0] <= t <= self.grid[-1]):
            raise DomainError(f"time {t} outside the grid")
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(k, len(self.grid) - 2)

    def coarsen(self) -> "DiscretizedPath":
        """The same path discretized one level lower (dyadic grids only)."""
        if self.level <= 1:
            raise DomainError("cannot coarsen below level 1")
        if len(self.grid) != 2**self.level + 1:
            raise DomainError("coarsening needs a plain dyadic grid")
        return DiscretizedPath(self.level - 1, self.grid[::2].copy(), np.floor_divide(self.bins[::2], 2))


def discretize(path: SamplePath, level: int, forced: Iterable[float] = ()) -> DiscretizedPath:
    """Read ``path`` on the level-``level`` dyadic grid and bin every coordinate."""
    grid = dyadic_grid(path.horizon, level, forced)
    idx = np.searchsorted(path.times, grid, side="right") - 1
    vals = path.values[idx]
    bins = np.floor(vals * 2**level).astype(np.int64)
    return DiscretizedPath(int(level), grid, bins)


def write_paths_csv(fh, paths: Sequence[SamplePath], ids: Sequence | None = None) -> None:
    """Write paths in long format: ``subject_id, time, <one column per coordinate>``."""
    if not paths:
        raise DomainError("nothing to write")
    names = paths[0].names
    ids = list(range(len(paths))) if ids is None else list(ids)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["subject_id", "time", *names])
    for sid, p in zip(ids, paths):
        if p.names != names:
            raise DomainError("all paths must share coordinate names")
        for t, row in zip(p.times, p.values):
            w.writerow([sid, repr(float(t)), *(repr(float(v)) for v in row)])


def read_paths_csv(fh, horizon: float) -> tuple[list, list[SamplePath]]:
    """Inverse of :func:`write_paths_csv`. Returns ``(ids, paths)`` in file order."""
    r = csv.reader(fh)
    header = next(r)
    if header[:2] != ["subject_id", "time"]:
        raise DomainError("expected columns subject_id, time, ...")
    names = tuple(header[2:])
    rows: dict[str, list] = {}
    for rec in r:
        if not rec:
            continue
        rows.setdefault(rec[0], []).append([float(x) for x in rec[1:]])
    ids, paths = [], []
    for sid, recs in rows.items():
        arr = np.asarray(recs)
        if arr[0, 0] != 0.0:
            raise DomainError(f"subject {sid}: first row must be at time 0")
        ids.append(sid)
        paths.append(SamplePath(horizon, arr[:, 0], arr[:, 1:], names))
    return ids, paths
