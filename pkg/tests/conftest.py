"""Shared fixtures and small data builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from space_fda import (FunctionalDataset, Location, Observation, make_grid)


def dataset_from_arrays(coords, times_per_curve, values_per_curve,
                        domain=(0.0, 1.0)) -> FunctionalDataset:
    """Build a dataset from per-curve time/value arrays."""
    locations = [Location(id=i, x=float(x), y=float(y))
                 for i, (x, y) in enumerate(coords)]
    observations = []
    for i, (ts, ys) in enumerate(zip(times_per_curve, values_per_curve)):
        observations.extend(Observation(location_id=i, t=float(t), y=float(v))
                            for t, v in zip(ts, ys))
    return FunctionalDataset(locations, observations, domain)


def line_coords(n: int):
    """1D vertical array of locations, matching the simulation layout."""
    return [(0.0, float(i + 1)) for i in range(n)]


def grid_coords(edge: int):
    """2D integer grid of locations with the given edge length."""
    return [(float(i + 1), float(j + 1)) for i in range(edge) for j in range(edge)]


@pytest.fixture
def unit_grid():
    return make_grid((0.0, 1.0), 101)


@pytest.fixture
def coarse_grid():
    return make_grid((0.0, 1.0), 51)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
