"""Local linear Gaussian-kernel smoothers for sparse functional data.

The mean curve is a pooled 1D local linear fit; covariance and
cross-covariance surfaces are 2D local linear fits of raw centered
products. Both smoothers are linear in the response, so the design side
(kernel weights and the inverted local normal equations) is precomputed
once per set of observation times and reused for every new set of values.
That reuse is what makes bootstrap refits cheap: resampled curves share
the original sampling times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import EvalGrid, FunctionalDataset
from .errors import (DegenerateFitError, InsufficientDataError,
                     InvalidArgumentError)

# Relative floor for the local design's centered Gram determinant; below it
# the weighted support is collinear (or a single point) at that node.
_GRAM_TOL = 1e-8


@dataclass(frozen=True)
class SmootherConfig:
    """Bandwidths for the mean (``h_mu``) and surface (``h_g``) smoothers.

    The kernel family is fixed Gaussian (product Gaussian in 2D).
    """

    h_mu: float
    h_g: float

    def __post_init__(self):
        for name, h in (("h_mu", self.h_mu), ("h_g", self.h_g)):
            if not np.isfinite(h) or h <= 0.0:
                raise InvalidArgumentError(f"{name} must be positive, got {h}")


@dataclass(frozen=True)
class RawCovPoint:
    """One raw cross-covariance product at surface coordinates (s, t)."""

    s: float
    t: float
    d: float
    same_curve_diagonal: bool


class RawCovPoints:
    """Array-backed sequence of :class:`RawCovPoint`.

    Stored as parallel vectors so smoothing stays vectorized; indexing
    returns scalar points for inspection and tests.
    """

    __slots__ = ("s", "t", "d", "same_curve_diagonal")

    def __init__(self, s, t, d, same_curve_diagonal):
        self.s = np.asarray(s, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.d = np.asarray(d, dtype=float)
        self.same_curve_diagonal = np.asarray(same_curve_diagonal, dtype=bool)
        if not (self.s.shape == self.t.shape == self.d.shape
                == self.same_curve_diagonal.shape):
            raise InvalidArgumentError("raw covariance arrays must share a shape")

    def __len__(self) -> int:
        return int(self.s.shape[0])

    def __getitem__(self, k: int) -> RawCovPoint:
        return RawCovPoint(float(self.s[k]), float(self.t[k]), float(self.d[k]),
                           bool(self.same_curve_diagonal[k]))

    def off_diagonal(self) -> "RawCovPoints":
        keep = ~self.same_curve_diagonal
        return RawCovPoints(self.s[keep], self.t[keep], self.d[keep],
                            self.same_curve_diagonal[keep])


@dataclass(frozen=True)
class Surface:
    """A smoothed surface evaluated on the grid's M x M tensor mesh."""

    grid: EvalGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        m = self.grid.m
        if vals.shape != (m, m):
            raise InvalidArgumentError(
                f"surface values must be {m}x{m}, got {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def symmetrized(self) -> "Surface":
        return Surface(self.grid, 0.5 * (self.values + self.values.T))

    def diagonal(self) -> np.ndarray:
        return np.diag(self.values)


def _gaussian(u: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * u * u)


class MeanSmoother:
    """Precomputed 1D local linear design over fixed sample times.

    ``weights`` maps response values to the grid estimate: mu = W @ y.
    """

    def __init__(self, times: np.ndarray, h: float, grid: EvalGrid):
        times = np.asarray(times, dtype=float)
        if np.unique(times).size < 2:
            raise InsufficientDataError(
                "mean smoothing needs at least 2 distinct observation times")
        dx = times[None, :] - grid.points[:, None]          # (M, n)
        w = _gaussian(dx / h)
        s0 = w.sum(axis=1)
        s1 = (w * dx).sum(axis=1)
        s2 = (w * dx * dx).sum(axis=1)
        denom = s0 * s2 - s1 * s1
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_dx = s1 / s0
            var_dx = s2 / s0 - mean_dx * mean_dx
        bad = ~np.isfinite(var_dx) | (var_dx < _GRAM_TOL * h * h) | (s0 <= 0.0)
        if np.any(bad):
            node = int(np.argmax(bad))
            raise DegenerateFitError(
                f"degenerate local design at grid point {node} "
                f"(t={grid.points[node]:.6g}): weighted times are collinear; "
                f"consider a larger bandwidth",
                node=(node, float(grid.points[node])))
        self.weights = w * (s2[:, None] - dx * s1[:, None]) / denom[:, None]
        self.grid = grid

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.weights @ np.asarray(values, dtype=float)


def smooth_mean(dataset: FunctionalDataset, cfg: SmootherConfig,
                grid: EvalGrid) -> np.ndarray:
    """Pooled local linear estimate of the mean curve on the grid."""
    return MeanSmoother(dataset.pooled_times, cfg.h_mu, grid).apply(
        dataset.pooled_values)


def mean_at(grid: EvalGrid, mu_hat: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Mean values at arbitrary times by linear interpolation of the grid."""
    return np.interp(np.asarray(times, dtype=float), grid.points, mu_hat)


def raw_cross_covariances(dataset: FunctionalDataset, mu_hat: np.ndarray,
                          grid: EvalGrid,
                          pairs: Sequence[tuple[int, int]]) -> RawCovPoints:
    """Raw centered products for every observation pair of each location pair.

    For a pair (i, j) the point set is the Cartesian product of curve i's
    and curve j's observations; (s, t) carries curve i's time first. Points
    with i = j and coinciding times are flagged as the noisy diagonal.
    """
    if len(pairs) == 0:
        raise InvalidArgumentError("empty location-pair list")
    index = {loc.id: k for k, loc in enumerate(dataset.locations)}
    centered = dataset.pooled_values - mean_at(grid, mu_hat, dataset.pooled_times)
    s_parts, t_parts, d_parts, diag_parts = [], [], [], []
    for i, j in pairs:
        si = dataset.curve_slices[index[i]]
        sj = dataset.curve_slices[index[j]]
        ti = dataset.pooled_times[si]
        tj = dataset.pooled_times[sj]
        ci = centered[si]
        cj = centered[sj]
        ss, tt = np.meshgrid(ti, tj, indexing="ij")
        s_parts.append(ss.ravel())
        t_parts.append(tt.ravel())
        d_parts.append(np.outer(ci, cj).ravel())
        if i == j:
            diag_parts.append((ss == tt).ravel())
        else:
            diag_parts.append(np.zeros(ss.size, dtype=bool))
    return RawCovPoints(np.concatenate(s_parts), np.concatenate(t_parts),
                        np.concatenate(d_parts), np.concatenate(diag_parts))


class SurfaceSmoother:
    """Precomputed 2D local linear design over fixed (s, t) support.

    The estimate at each grid node is ``gamma . (T00, T10, T01)`` where the
    T-moments are the only value-dependent quantities.

    When the raw coordinates take few distinct values (observation times on
    a sampling grid, the common case), the moments factor through a small
    (distinct s) x (distinct t) accumulation matrix and each apply costs a
    scatter-add plus small matrix products, independent of the raw point
    count. Scattered continuous coordinates fall back to chunked dense
    kernel products with bounded memory.
    """

    _CHUNK = 50_000

    def __init__(self, s: np.ndarray, t: np.ndarray, h: float, grid: EvalGrid,
                 keep_kernels: bool | None = None):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if s.size < 3:
            raise InsufficientDataError(
                "surface smoothing needs at least 3 raw points")
        self.h = float(h)
        self.grid = grid
        self._s = s
        self._t = t
        self._cache = None
        self._factored = None

        m = grid.m
        s_unique, s_code = np.unique(s, return_inverse=True)
        t_unique, t_code = np.unique(t, return_inverse=True)
        if s_unique.size * t_unique.size <= max(2 * s.size * m, 4 * m * m):
            ds = s_unique[:, None] - grid.points[None, :]
            dt = t_unique[:, None] - grid.points[None, :]
            a0 = _gaussian(ds / h)
            b0 = _gaussian(dt / h)
            a1 = a0 * ds
            b1 = b0 * dt
            flat = s_code * t_unique.size + t_code
            counts = np.bincount(
                flat, minlength=s_unique.size * t_unique.size).reshape(
                    s_unique.size, t_unique.size).astype(float)
            self._factored = (a0, a1, a1 * ds, b0, b1, b1 * dt, flat,
                              (s_unique.size, t_unique.size))
            c_b0 = counts @ b0
            s00 = a0.T @ c_b0
            s10 = a1.T @ c_b0
            s20 = (a1 * ds).T @ c_b0
            s01 = a0.T @ (counts @ b1)
            s11 = a1.T @ (counts @ b1)
            s02 = a0.T @ (counts @ (b1 * dt))
        else:
            if keep_kernels is None:
                keep_kernels = s.size <= self._CHUNK
            moments = np.zeros((6, m, m))
            for a0, a1, b0, b1, ds, dt, _ in self._factor_chunks(None):
                moments[0] += a0.T @ b0
                moments[1] += a1.T @ b0
                moments[2] += a0.T @ b1
                moments[3] += (a1 * ds).T @ b0
                moments[4] += a1.T @ b1
                moments[5] += a0.T @ (b1 * dt)
                if keep_kernels and s.size <= self._CHUNK:
                    self._cache = (a0, a1, b0, b1)
            s00, s10, s01, s20, s11, s02 = moments
        with np.errstate(invalid="ignore", divide="ignore"):
            m10 = s10 / s00
            m01 = s01 / s00
            v20 = s20 / s00 - m10 * m10
            v02 = s02 / s00 - m01 * m01
            v11 = s11 / s00 - m10 * m01
            gram = v20 * v02 - v11 * v11
        bad = (~np.isfinite(gram)) | (gram < _GRAM_TOL * h ** 4) | (s00 <= 0.0)
        if np.any(bad):
            ai, bi = np.unravel_index(int(np.argmax(bad)), gram.shape)
            raise DegenerateFitError(
                f"degenerate local design at grid node ({ai}, {bi}) "
                f"(s={grid.points[ai]:.6g}, t={grid.points[bi]:.6g}); "
                f"consider a larger bandwidth",
                node=(int(ai), int(bi)))
        normal = np.empty((m, m, 3, 3))
        normal[..., 0, 0] = s00
        normal[..., 0, 1] = normal[..., 1, 0] = s10
        normal[..., 0, 2] = normal[..., 2, 0] = s01
        normal[..., 1, 1] = s20
        normal[..., 1, 2] = normal[..., 2, 1] = s11
        normal[..., 2, 2] = s02
        rhs = np.zeros((m, m, 3))
        rhs[..., 0] = 1.0
        # first row of the inverse normal matrix at every node
        self._gamma = np.linalg.solve(normal, rhs[..., None])[..., 0]

    def _factor_chunks(self, d: np.ndarray | None):
        """Yield kernel factors (and the value slice) chunk by chunk."""
        pts = self.grid.points[None, :]
        n = self._s.size
        for lo in range(0, n, self._CHUNK):
            hi = min(lo + self._CHUNK, n)
            ds = self._s[lo:hi, None] - pts
            dt = self._t[lo:hi, None] - pts
            a0 = _gaussian(ds / self.h)
            b0 = _gaussian(dt / self.h)
            yield (a0, a0 * ds, b0, b0 * dt, ds, dt,
                   None if d is None else d[lo:hi])

    def apply(self, d: np.ndarray) -> Surface:
        d = np.asarray(d, dtype=float)
        if d.shape != self._s.shape:
            raise InvalidArgumentError("values must align with the raw points")
        if self._factored is not None:
            a0, a1, a2, b0, b1, b2, flat, shape = self._factored
            sums = np.bincount(flat, weights=d,
                               minlength=shape[0] * shape[1]).reshape(shape)
            d_b0 = sums @ b0
            t00 = a0.T @ d_b0
            t10 = a1.T @ d_b0
            t01 = a0.T @ (sums @ b1)
        elif self._cache is not None:
            a0, a1, b0, b1 = self._cache
            a0d = a0 * d[:, None]
            t00 = a0d.T @ b0
            t10 = (a1 * d[:, None]).T @ b0
            t01 = a0d.T @ b1
        else:
            m = self.grid.m
            t00 = np.zeros((m, m))
            t10 = np.zeros((m, m))
            t01 = np.zeros((m, m))
            for a0, a1, b0, b1, _, _, dc in self._factor_chunks(d):
                a0d = a0 * dc[:, None]
                t00 += a0d.T @ b0
                t10 += (a1 * dc[:, None]).T @ b0
                t01 += a0d.T @ b1
        values = (self._gamma[..., 0] * t00 + self._gamma[..., 1] * t10
                  + self._gamma[..., 2] * t01)
        return Surface(self.grid, values)


def smooth_surface(points: RawCovPoints, cfg: SmootherConfig, grid: EvalGrid,
                   drop_diagonal: bool = False) -> Surface:
    """Local linear fit of raw products over the grid mesh.

    With ``drop_diagonal`` the same-curve equal-time points (which carry the
    measurement-noise variance on top of the surface) are excluded.
    """
    pts = points.off_diagonal() if drop_diagonal else points
    smoother = SurfaceSmoother(pts.s, pts.t, cfg.h_g, grid, keep_kernels=False)
    return smoother.apply(pts.d)


def loclin_predict_1d(x: np.ndarray, y: np.ndarray, h: float,
                      x_eval: np.ndarray) -> np.ndarray:
    """Local linear prediction at arbitrary points (no grid involved)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_eval = np.asarray(x_eval, dtype=float)
    dx = x[None, :] - x_eval[:, None]
    w = _gaussian(dx / h)
    s0 = w.sum(axis=1)
    s1 = (w * dx).sum(axis=1)
    s2 = (w * dx * dx).sum(axis=1)
    denom = s0 * s2 - s1 * s1
    with np.errstate(invalid="ignore", divide="ignore"):
        var_dx = s2 / s0 - (s1 / s0) ** 2
    bad = ~np.isfinite(var_dx) | (var_dx < _GRAM_TOL * h * h) | (s0 <= 0.0)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DegenerateFitError(
            f"degenerate local design at evaluation point {x_eval[k]:.6g}",
            node=(k, float(x_eval[k])))
    c = w * (s2[:, None] - dx * s1[:, None]) / denom[:, None]
    return c @ y


def loclin_predict_2d(s: np.ndarray, t: np.ndarray, d: np.ndarray, h: float,
                      s_eval: np.ndarray, t_eval: np.ndarray,
                      chunk: int = 100_000) -> np.ndarray:
    """2D local linear prediction at arbitrary (s, t) points.

    The support is processed in chunks so very large raw point sets never
    materialize a full weight matrix.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    s_eval = np.asarray(s_eval, dtype=float)
    t_eval = np.asarray(t_eval, dtype=float)
    n_eval = s_eval.shape[0]
    sums = np.zeros((9, n_eval))
    for lo in range(0, s.size, chunk):
        hi = min(lo + chunk, s.size)
        ds = s[None, lo:hi] - s_eval[:, None]
        dt = t[None, lo:hi] - t_eval[:, None]
        w = _gaussian(ds / h) * _gaussian(dt / h)
        dc = d[None, lo:hi]
        sums[0] += w.sum(axis=1)
        sums[1] += (w * ds).sum(axis=1)
        sums[2] += (w * dt).sum(axis=1)
        sums[3] += (w * ds * ds).sum(axis=1)
        sums[4] += (w * ds * dt).sum(axis=1)
        sums[5] += (w * dt * dt).sum(axis=1)
        sums[6] += (w * dc).sum(axis=1)
        sums[7] += (w * ds * dc).sum(axis=1)
        sums[8] += (w * dt * dc).sum(axis=1)
    s00, s10, s01, s20, s11, s02, t00, t10, t01 = sums
    with np.errstate(invalid="ignore", divide="ignore"):
        m10 = s10 / s00
        m01 = s01 / s00
        gram = ((s20 / s00 - m10 * m10) * (s02 / s00 - m01 * m01)
                - (s11 / s00 - m10 * m01) ** 2)
    bad = (~np.isfinite(gram)) | (gram < _GRAM_TOL * h ** 4) | (s00 <= 0.0)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DegenerateFitError(
            f"degenerate local design at evaluation point "
            f"({s_eval[k]:.6g}, {t_eval[k]:.6g})", node=(k,))
    normal = np.empty((n_eval, 3, 3))
    normal[:, 0, 0] = s00
    normal[:, 0, 1] = normal[:, 1, 0] = s10
    normal[:, 0, 2] = normal[:, 2, 0] = s01
    normal[:, 1, 1] = s20
    normal[:, 1, 2] = normal[:, 2, 1] = s11
    normal[:, 2, 2] = s02
    rhs = np.stack([t00, t10, t01], axis=1)
    beta = np.linalg.solve(normal, rhs[..., None])[..., 0]
    return beta[:, 0]


def estimate_sigma2(dataset: FunctionalDataset, mu_hat: np.ndarray,
                    g00: Surface, cfg: SmootherConfig,
                    method: str = "difference") -> float:
    """Measurement-noise variance from same-curve products, floored at zero.

    ``method="difference"`` (default) regresses the squared half-differences
    (r_k - r_l)^2 / 2 of same-curve residuals on the squared time gap and
    reads the noise variance off the zero-gap intercept, restricted to
    pairs whose midpoint lies in the middle half of the time domain. The
    shared component noise cancels within each pair, which keeps both bias
    and variance far below what the surface-diagonal gap achieves.

    ``method="surface"`` is the surface-diagonal form: a 1D local linear
    smooth V(t) of the squared residuals minus the diagonal of ``g00``
    (which must be the zero-separation surface smoothed with the diagonal
    dropped), averaged over the middle half via the trapezoid rule. Its
    value inherits an O(h^2) cross-curvature bias from the surface
    bandwidth; it is kept for comparison.
    """
    grid = g00.grid
    if dataset.pooled_times.size < 3:
        raise InsufficientDataError(
            "noise variance needs at least 3 observations")
    resid = dataset.pooled_values - mean_at(grid, mu_hat, dataset.pooled_times)
    t0, t1 = grid.t_min, grid.t_max
    span = t1 - t0

    if method == "surface":
        v_hat = MeanSmoother(dataset.pooled_times, cfg.h_g, grid).apply(resid ** 2)
        gap = v_hat - g00.diagonal()
        inside = ((grid.points >= t0 + 0.25 * span)
                  & (grid.points <= t1 - 0.25 * span))
        integral = np.trapezoid(gap[inside], grid.points[inside])
        return max(0.0, float(2.0 * integral / span))
    if method != "difference":
        raise InvalidArgumentError(f"unknown method {method!r}")
    return sigma2_from_residuals(dataset.pooled_times, resid,
                                 dataset.curve_slices, (t0, t1))


def sigma2_from_residuals(times: np.ndarray, resid: np.ndarray,
                          slices: Sequence[slice],
                          domain: tuple[float, float]) -> float:
    """Difference-based noise variance from precentered residuals.

    Core of :func:`estimate_sigma2`; exposed so refit engines can reuse it
    without rebuilding a dataset around already-centered values.
    """
    t0, t1 = domain
    span = t1 - t0
    gaps, sq_half_diffs = [], []
    for sl in slices:
        ti = times[sl]
        ci = resid[sl]
        if ti.size < 2:
            continue
        iu, ju = np.triu_indices(ti.size, k=1)
        mid = 0.5 * (ti[iu] + ti[ju])
        keep = ((mid >= t0 + 0.25 * span) & (mid <= t1 - 0.25 * span)
                & (ti[iu] != ti[ju]))
        if not np.any(keep):
            continue
        gaps.append((ti[iu] - ti[ju])[keep])
        sq_half_diffs.append(0.5 * (ci[iu] - ci[ju])[keep] ** 2)
    if not gaps:
        raise InsufficientDataError(
            "no same-curve pairs with midpoints in the integration window")
    u = np.concatenate(gaps)
    y = np.concatenate(sq_half_diffs)
    if u.size < 3:
        raise InsufficientDataError(
            "noise variance needs at least 3 same-curve pairs")
    w = _gaussian(u / (0.1 * span))
    x = (u / span) ** 2
    # weighted quadratic-in-gap^2 fit; the intercept is the noise variance
    design = np.stack([np.ones_like(x), x, x * x], axis=1)
    wd = design * w[:, None]
    normal = wd.T @ design
    rhs = wd.T @ y
    try:
        coef = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        raise InsufficientDataError("degenerate gap design for noise variance")
    if not np.all(np.isfinite(coef)):
        raise InsufficientDataError("degenerate gap design for noise variance")
    return max(0.0, float(coef[0]))
