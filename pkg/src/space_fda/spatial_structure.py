"""Separation vectors and the stationarity pooling sets built from them.

A separation vector identifies the set of location pairs that share one
spatial correlation value; correlation is even in the vector, so (dx, dy)
and (-dx, -dy) are the same structure and are stored canonically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import Location
from .errors import InvalidArgumentError

# Vectors used for 2D estimation, ordered by increasing pair scarcity; the
# m-th nested subset is the prefix of length m + 4.
TWO_D_VECTORS: tuple[tuple[int, int], ...] = (
    (1, 0), (1, 1), (0, 1), (1, -1), (2, 0), (2, 1), (2, 2), (1, 2),
    (0, 2), (1, -2), (2, -2), (2, -1), (3, 0), (3, 1), (3, 2), (3, 3),
    (2, 3), (1, 3), (0, 3), (1, -3), (2, -3), (3, -3), (3, -2), (3, -1),
)


@dataclass(frozen=True)
class SeparationVector:
    """Canonical spatial separation: dx > 0, or dx = 0 with dy >= 0."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise InvalidArgumentError(
                f"non-finite separation ({self.dx}, {self.dy})")
        dx, dy = canonical_components(self.dx, self.dy)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def is_zero(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0

    def norm(self) -> float:
        return math.hypot(self.dx, self.dy)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy], dtype=float)


def canonical_components(dx: float, dy: float) -> tuple[float, float]:
    """Map (dx, dy) and (-dx, -dy) to one representative."""
    dx, dy = float(dx), float(dy)
    if dx < 0.0 or (dx == 0.0 and dy < 0.0):
        dx, dy = -dx, -dy
    # normalize -0.0 so tuples hash/compare consistently
    return dx + 0.0, dy + 0.0


@dataclass(frozen=True)
class SeparationStructure:
    """All location pairs whose separation falls in B(delta, radius).

    Pairs are stored oriented: the separation from the first to the second
    id matches the +delta side (ties broken by the smaller id first).
    Self-pairs (i, i) appear only in the delta = (0, 0) structure.
    """

    delta: SeparationVector
    radius: float
    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)


def find_pairs(locations: Sequence[Location], delta: SeparationVector,
               radius: float = 0.0) -> SeparationStructure:
    """Enumerate the pooling set N(delta, radius) over all location pairs.

    Symmetric by construction: the same structure results for -delta.
    An empty pair list is a valid result.
    """
    if radius < 0.0 or not math.isfinite(radius):
        raise InvalidArgumentError(f"invalid ball radius {radius}")
    ids = [loc.id for loc in locations]
    coords = np.array([[loc.x, loc.y] for loc in locations], dtype=float)
    n = len(ids)
    pairs: list[tuple[int, int]] = []
    if n == 0:
        return SeparationStructure(delta, radius, ())

    if delta.is_zero:
        pairs.extend((i, i) for i in ids)

    d = delta.as_array()
    # tolerance keeps radius-0 matches robust on float coordinates
    tol = radius + 1e-9 * (1.0 + delta.norm())
    diff = coords[None, :, :] - coords[:, None, :]          # diff[i, j] = x_j - x_i
    plus = np.linalg.norm(diff - d[None, None, :], axis=2) <= tol
    minus = np.linalg.norm(diff + d[None, None, :], axis=2) <= tol
    iu, ju = np.triu_indices(n, k=1)
    for i, j in zip(iu, ju):
        if plus[i, j]:
            pairs.append((ids[i], ids[j]))
        elif minus[i, j]:
            pairs.append((ids[j], ids[i]))
    return SeparationStructure(delta, radius, tuple(pairs))


def default_delta_ladder(dimension: int, m_max: int) -> list[list[SeparationVector]]:
    """Nested separation-vector subsets used for estimation.

    1D: ladders {(0,1), ..., (0,m)} for m = 1..m_max over a vertical array.
    2D: prefixes of length m + 4 of the fixed 24-vector ordering.
    """
    if m_max < 1:
        raise InvalidArgumentError(f"m_max must be positive, got {m_max}")
    if dimension == 1:
        if m_max > 20:
            raise InvalidArgumentError(f"1D ladder supports m_max <= 20, got {m_max}")
        full = [SeparationVector(0.0, float(m)) for m in range(1, m_max + 1)]
        return [full[:m] for m in range(1, m_max + 1)]
    if dimension == 2:
        if m_max > len(TWO_D_VECTORS) - 4:
            raise InvalidArgumentError(
                f"2D ladder supports m_max <= {len(TWO_D_VECTORS) - 4}, got {m_max}")
        full = [SeparationVector(float(a), float(b)) for a, b in TWO_D_VECTORS]
        return [full[:m + 4] for m in range(1, m_max + 1)]
    raise InvalidArgumentError(f"dimension must be 1 or 2, got {dimension}")
