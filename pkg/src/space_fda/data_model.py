"""Core data containers: locations, sparse observations, the evaluation grid.

All types are immutable after construction and safe to share across threads.
``FunctionalDataset`` precomputes grouped per-location views (index slices
into pooled arrays) because every downstream module consumes observations
curve by curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_GRID_POINTS = 101


@dataclass(frozen=True)
class Location:
    """A spatial site, coordinates in grid units."""

    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Observation:
    """One measured value of the curve at ``location_id`` at time ``t``."""

    location_id: int
    t: float
    y: float


@dataclass(frozen=True)
class Diagnostic:
    """A single validation finding: the violated invariant plus the record."""

    invariant: str
    detail: str

    def __str__(self) -> str:  # pragma: no cover - convenience only
        return f"{self.invariant}: {self.detail}"


@dataclass(frozen=True)
class EvalGrid:
    """Equally spaced evaluation times spanning the time domain."""

    points: np.ndarray
    step: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return int(self.points.shape[0])

    @property
    def t_min(self) -> float:
        return float(self.points[0])

    @property
    def t_max(self) -> float:
        return float(self.points[-1])


def make_grid(domain: tuple[float, float], m: int) -> EvalGrid:
    """Build an ``m``-point equally spaced grid over ``domain``.

    The first point is ``t_min``, the last ``t_max``, and the spacing is
    uniform to floating-point accuracy.
    """
    t_min, t_max = float(domain[0]), float(domain[1])
    if m < 2:
        raise InvalidArgumentError(f"grid needs at least 2 points, got {m}")
    if not (math.isfinite(t_min) and math.isfinite(t_max)) or t_max <= t_min:
        raise InvalidArgumentError(f"invalid time domain [{t_min}, {t_max}]")
    points = np.linspace(t_min, t_max, m)
    step = (t_max - t_min) / (m - 1)
    return EvalGrid(points=points, step=step)


@dataclass(frozen=True)
class FunctionalDataset:
    """Sparse noisy samples from one curve per location.

    Pooled numpy views are built once at construction:

    - ``pooled_times`` / ``pooled_values``: all observations in input order,
      grouped by location (dataset order of locations).
    - ``curve_slices``: per-location slices into the pooled arrays.
    """

    locations: tuple[Location, ...]
    observations: tuple[Observation, ...]
    time_domain: tuple[float, float]

    pooled_times: np.ndarray = field(init=False, repr=False, compare=False)
    pooled_values: np.ndarray = field(init=False, repr=False, compare=False)
    curve_slices: tuple[slice, ...] = field(init=False, repr=False, compare=False)

    def __init__(self, locations: Iterable[Location],
                 observations: Iterable[Observation],
                 time_domain: tuple[float, float] = (0.0, 1.0)):
        object.__setattr__(self, "locations", tuple(locations))
        object.__setattr__(self, "observations", tuple(observations))
        object.__setattr__(self, "time_domain",
                           (float(time_domain[0]), float(time_domain[1])))
        by_loc: dict[int, list[Observation]] = {loc.id: [] for loc in self.locations}
        for obs in self.observations:
            if obs.location_id in by_loc:
                by_loc[obs.location_id].append(obs)
        times, values, slices = [], [], []
        start = 0
        for loc in self.locations:
            group = by_loc[loc.id]
            times.extend(o.t for o in group)
            values.extend(o.y for o in group)
            slices.append(slice(start, start + len(group)))
            start += len(group)
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "pooled_times", t)
        object.__setattr__(self, "pooled_values", v)
        object.__setattr__(self, "curve_slices", tuple(slices))

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def location_ids(self) -> tuple[int, ...]:
        return tuple(loc.id for loc in self.locations)

    def coords(self) -> np.ndarray:
        """Location coordinates as an (N, 2) array, dataset order."""
        return np.array([[loc.x, loc.y] for loc in self.locations], dtype=float)

    def counts(self) -> np.ndarray:
        """Observations per location, dataset order."""
        return np.array([s.stop - s.start for s in self.curve_slices], dtype=int)

    def curve(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Times and values of the curve at dataset position ``index``."""
        s = self.curve_slices[index]
        return self.pooled_times[s], self.pooled_values[s]

    def subset(self, ids: Sequence[int]) -> "FunctionalDataset":
        """Dataset restricted to the given location ids (kept in given order)."""
        keep = set(ids)
        locs = [loc for i in ids for loc in self.locations if loc.id == i]
        obs = [o for o in self.observations if o.location_id in keep]
        return FunctionalDataset(locs, obs, self.time_domain)


def validate_dataset(dataset: FunctionalDataset) -> list[Diagnostic]:
    """Check every dataset invariant; an empty list means the data are clean.

    Pure and idempotent: diagnostics are reported, never raised, so callers
    can surface all problems at once.
    """
    out: list[Diagnostic] = []
    t_min, t_max = dataset.time_domain
    if not (math.isfinite(t_min) and math.isfinite(t_max)) or t_max <= t_min:
        out.append(Diagnostic("time domain", f"invalid interval [{t_min}, {t_max}]"))

    seen_ids: set[int] = set()
    for loc in dataset.locations:
        if loc.id in seen_ids:
            out.append(Diagnostic("duplicate location id", f"id {loc.id}"))
        seen_ids.add(loc.id)
        if not (math.isfinite(loc.x) and math.isfinite(loc.y)):
            out.append(Diagnostic("non-finite coordinates",
                                  f"location {loc.id}: ({loc.x}, {loc.y})"))

    counted: dict[int, int] = {loc.id: 0 for loc in dataset.locations}
    for k, obs in enumerate(dataset.observations):
        if obs.location_id not in counted:
            out.append(Diagnostic("dangling location",
                                  f"observation {k} references unknown "
                                  f"location {obs.location_id}"))
        else:
            counted[obs.location_id] += 1
        if not math.isfinite(obs.y):
            out.append(Diagnostic("non-finite value",
                                  f"observation {k} at location {obs.location_id}"))
        if not math.isfinite(obs.t) or obs.t < t_min or obs.t > t_max:
            out.append(Diagnostic("time out of domain",
                                  f"observation {k}: t={obs.t} outside "
                                  f"[{t_min}, {t_max}]"))
    for loc_id, n in counted.items():
        if n < 1:
            out.append(Diagnostic("location without observations", f"id {loc_id}"))
    return out
