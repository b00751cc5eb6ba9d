"""End-to-end model estimation: smoothing, eigen analysis, correlation fits.

``FitEngine`` precomputes everything that depends only on the observation
design (kernel factor matrices, local normal equations, pair index maps)
so that refitting the same design with new response values, which is what
the bootstrap tests do hundreds of times, costs three matrix products per
surface instead of a full smoother build.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data_model import (DEFAULT_GRID_POINTS, EvalGrid, FunctionalDataset,
                         make_grid)
from .eigen_analysis import (EigenSystem, EmpiricalCorrelation, eigendecompose,
                             match_eigenpairs)
from .errors import (DegenerateEigenvalueError, InsufficientDataError,
                     InvalidArgumentError)
from .matern import FitConfig, MaternParams, fit_matern, trimmed_estimate
from .model_selection import best_bandwidth, lobo_bandwidth
from .reconstruction import SpaceModel
from .smoothing import (MeanSmoother, SmootherConfig, SurfaceSmoother,
                        raw_cross_covariances, sigma2_from_residuals,
                        smooth_mean)
from .spatial_structure import (SeparationStructure, SeparationVector,
                                default_delta_ladder, find_pairs)


@dataclass(frozen=True)
class PipelineConfig:
    """Tuning knobs for the full estimation pipeline.

    ``None`` bandwidths are selected by leave-one-bin-out cross-validation.
    ``force_isotropic=None`` resolves by layout: collinear (1D) location
    sets cannot identify an anisotropy direction, so they fit isotropic.
    """

    n_components: int = 2
    bandwidth_mean: float | None = None
    bandwidth_surface: float | None = None
    grid_points: int = DEFAULT_GRID_POINTS
    max_ladder: int = 20
    ball_radius: float = 0.0
    separable: bool = False
    force_isotropic: bool | None = None
    trim: float = 0.2
    fit: FitConfig = field(default_factory=FitConfig)
    cv_bins: int = 10
    mean_bandwidth_candidates: tuple[float, ...] | None = None
    surface_bandwidth_candidates: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SpaceFit:
    """Fitted model plus the estimation byproducts worth reporting."""

    model: SpaceModel
    correlations: tuple[EmpiricalCorrelation, ...]
    ladder_estimates: dict
    bandwidths: tuple[float, float]
    dimension: int
    deltas: tuple[SeparationVector, ...]


def infer_dimension(coords: np.ndarray) -> int:
    """1 when the locations are collinear, else 2."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] < 3:
        return 1
    centered = coords - coords.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    return 2 if svals[1] > 1e-9 * max(svals[0], 1.0) else 1


def _unit_spacing(coords: np.ndarray, dimension: int) -> tuple[float, np.ndarray]:
    """Grid spacing and (for 1D) the unit direction along the layout."""
    coords = np.asarray(coords, dtype=float)
    if dimension == 1:
        centered = coords - coords.mean(axis=0)
        _, _, vt = np.linalg.svd(centered)
        direction = vt[0]
        # snap numerically-axis-aligned layouts to exact axes
        if abs(direction[0]) < 1e-9:
            direction = np.array([0.0, 1.0])
        elif abs(direction[1]) < 1e-9:
            direction = np.array([1.0, 0.0])
        elif direction[1] < 0 or (direction[1] == 0 and direction[0] < 0):
            direction = -direction
        proj = np.sort(centered @ direction)
        gaps = np.diff(proj)
        gaps = gaps[gaps > 1e-12]
        spacing = float(np.median(gaps)) if gaps.size else 1.0
        return spacing, direction
    gaps = []
    for axis in (0, 1):
        vals = np.unique(coords[:, axis])
        diffs = np.diff(vals)
        gaps.extend(diffs[diffs > 1e-12])
    spacing = float(np.median(gaps)) if gaps else 1.0
    return spacing, np.array([1.0, 0.0])


def delta_set_for(coords: np.ndarray, dimension: int,
                  max_ladder: int) -> tuple[list[SeparationVector], list[int]]:
    """Separation vectors scaled to the layout plus nested prefix lengths."""
    spacing, direction = _unit_spacing(coords, dimension)
    ladders = default_delta_ladder(dimension, max_ladder)
    full = ladders[-1]
    if dimension == 1:
        scaled = [SeparationVector(m * spacing * direction[0],
                                   m * spacing * direction[1])
                  for m in range(1, len(full) + 1)]
    else:
        scaled = [SeparationVector(v.dx * spacing, v.dy * spacing) for v in full]
    prefixes = [len(l) for l in ladders]
    return scaled, prefixes


DEFAULT_MEAN_CANDIDATES = (0.02, 0.035, 0.05, 0.08, 0.12, 0.2)
DEFAULT_SURFACE_CANDIDATES = (0.05, 0.08, 0.12, 0.2, 0.3)


def select_bandwidths(data: FunctionalDataset, grid: EvalGrid,
                      config: PipelineConfig) -> tuple[float, float, dict]:
    """Resolve the mean/surface bandwidths, cross-validating missing ones."""
    span = grid.t_max - grid.t_min
    reports: dict = {}
    h_mu = config.bandwidth_mean
    if h_mu is None:
        cands = config.mean_bandwidth_candidates or tuple(
            c * span for c in DEFAULT_MEAN_CANDIDATES)
        rep = lobo_bandwidth((data.pooled_times, data.pooled_values), cands,
                             bins=config.cv_bins)
        reports["mean"] = rep
        h_mu = best_bandwidth(rep)
    h_g = config.bandwidth_surface
    if h_g is None:
        cands = config.surface_bandwidth_candidates or tuple(
            c * span for c in DEFAULT_SURFACE_CANDIDATES)
        mu = smooth_mean(data, SmootherConfig(h_mu=h_mu, h_g=1.0), grid)
        self_pairs = [(i, i) for i in data.location_ids]
        pts = raw_cross_covariances(data, mu, grid, self_pairs).off_diagonal()
        rep = lobo_bandwidth(pts, cands, bins=min(config.cv_bins, 6))
        reports["surface"] = rep
        h_g = best_bandwidth(rep)
    return float(h_mu), float(h_g), reports


class FitEngine:
    """Precomputed estimation design for one observation layout.

    ``estimate`` maps response values to the smoothed mean, base eigen
    system, and empirical correlations; only response-dependent work runs
    per call. The engine is what makes bootstrap refits affordable.
    """

    def __init__(self, data: FunctionalDataset, grid: EvalGrid, h_mu: float,
                 h_g: float, deltas: Sequence[SeparationVector],
                 ball_radius: float = 0.0, keep_kernels: bool = False):
        self.data = data
        self.grid = grid
        self.cfg = SmootherConfig(h_mu=h_mu, h_g=h_g)
        self.deltas = tuple(deltas)
        self.mean_smoother = MeanSmoother(data.pooled_times, h_mu, grid)
        index = {loc.id: i for i, loc in enumerate(data.locations)}
        times = data.pooled_times

        def pair_indices(structure: SeparationStructure, drop_equal_times):
            lefts, rights = [], []
            for a, b in structure.pairs:
                sa = data.curve_slices[index[a]]
                sb = data.curve_slices[index[b]]
                ia = np.arange(sa.start, sa.stop)
                ib = np.arange(sb.start, sb.stop)
                ga, gb = np.meshgrid(ia, ib, indexing="ij")
                ga, gb = ga.ravel(), gb.ravel()
                if drop_equal_times and a == b:
                    keep = times[ga] != times[gb]
                    ga, gb = ga[keep], gb[keep]
                lefts.append(ga)
                rights.append(gb)
            return np.concatenate(lefts), np.concatenate(rights)

        zero = SeparationVector(0.0, 0.0)
        self.structures: list[SeparationStructure] = []
        self._point_index: list[tuple[np.ndarray, np.ndarray]] = []
        self._smoothers: list[SurfaceSmoother] = []
        for delta in (zero,) + self.deltas:
            structure = find_pairs(data.locations, delta, ball_radius)
            if len(structure) == 0:
                raise InsufficientDataError(
                    f"no location pairs at separation ({delta.dx}, {delta.dy})")
            left, right = pair_indices(structure, drop_equal_times=delta.is_zero)
            self.structures.append(structure)
            self._point_index.append((left, right))
            self._smoothers.append(SurfaceSmoother(
                times[left], times[right], h_g, grid,
                keep_kernels=keep_kernels))

    def estimate(self, values: np.ndarray, n_components: int):
        """Mean, base eigen system, and per-separation correlation matrix."""
        values = np.asarray(values, dtype=float)
        mu = self.mean_smoother.apply(values)
        resid = values - np.interp(self.data.pooled_times, self.grid.points, mu)

        left, right = self._point_index[0]
        g00 = self._smoothers[0].apply(resid[left] * resid[right]).symmetrized()
        vals, funcs = eigendecompose(g00, n_components)
        lam = np.maximum(vals, 0.0)
        if np.any(lam <= 1e-12 * max(lam[0], 1e-300)):
            raise DegenerateEigenvalueError(
                "zero-separation surface has a vanishing leading eigenvalue")
        base = EigenSystem(grid=self.grid, mean=mu, eigenfunctions=funcs,
                           eigenvalues=lam, sigma2=0.0)

        rho = np.empty((len(self.deltas), n_components))
        for d, delta in enumerate(self.deltas):
            left, right = self._point_index[d + 1]
            surface = self._smoothers[d + 1].apply(resid[left] * resid[right])
            cvals, cfuncs = eigendecompose(surface.symmetrized(), n_components)
            matched, _ = match_eigenpairs(base, cvals, cfuncs)
            rho[d] = np.clip(matched / lam, -1.0, 1.0)
        return mu, resid, base, rho

    def noise_variance(self, resid: np.ndarray) -> float:
        return sigma2_from_residuals(self.data.pooled_times, resid,
                                     self.data.curve_slices,
                                     (self.grid.t_min, self.grid.t_max))

    def correlation_points(self, rho: np.ndarray, components: Sequence[int],
                           prefix: int):
        """(delta, correlation) pairs pooled over the given components."""
        return [(self.deltas[d], float(rho[d, k]))
                for k in components for d in range(prefix)]


def fit_correlation_models(engine: FitEngine, rho: np.ndarray,
                           prefixes: Sequence[int], fit_cfg: FitConfig,
                           trim: float, groups: Sequence[Sequence[int]],
                           ) -> tuple[list[MaternParams], dict]:
    """Trimmed-ladder correlation fits, pooling components within groups."""
    n_components = rho.shape[1]
    params: list[MaternParams | None] = [None] * n_components
    ladder_estimates: dict = {}
    for group in groups:
        ladders = [engine.correlation_points(rho, group, p) for p in prefixes]
        if len(ladders) == 1:
            fitted = fit_matern(ladders[0], fit_cfg)
        else:
            fitted = trimmed_estimate(ladders, fit_cfg, trim)
        ladder_estimates[tuple(group)] = fitted
        for k in group:
            params[k] = fitted
    return list(params), ladder_estimates


def resolve_fit_config(config: PipelineConfig, dimension: int) -> FitConfig:
    iso = config.force_isotropic
    if iso is None:
        iso = dimension == 1
    return replace(config.fit, fix_isotropic=iso)


def fit_space_model(data: FunctionalDataset, config: PipelineConfig | None = None,
                    engine: FitEngine | None = None) -> SpaceFit:
    """Run the full estimation pipeline and assemble the fitted model."""
    config = config or PipelineConfig()
    coords = data.coords()
    dimension = infer_dimension(coords)
    grid = make_grid(data.time_domain, config.grid_points)
    if engine is None:
        h_mu, h_g, _ = select_bandwidths(data, grid, config)
        deltas, prefixes = delta_set_for(coords, dimension, config.max_ladder)
        engine = FitEngine(data, grid, h_mu, h_g, deltas,
                           ball_radius=config.ball_radius)
    else:
        h_mu, h_g = engine.cfg.h_mu, engine.cfg.h_g
        _, prefixes = delta_set_for(coords, dimension, config.max_ladder)
        prefixes = [p for p in prefixes if p <= len(engine.deltas)]
    k_total = config.n_components
    mu, resid, base, rho = engine.estimate(data.pooled_values, k_total)
    sigma2 = engine.noise_variance(resid)
    eigen = EigenSystem(grid=engine.grid, mean=mu,
                        eigenfunctions=base.eigenfunctions,
                        eigenvalues=base.eigenvalues, sigma2=sigma2)
    fit_cfg = resolve_fit_config(config, dimension)
    groups = ([list(range(k_total))] if config.separable
              else [[k] for k in range(k_total)])
    params, ladder_estimates = fit_correlation_models(
        engine, rho, prefixes, fit_cfg, config.trim, groups)
    model = SpaceModel(eigen=eigen, matern=tuple(params),
                       separable=config.separable)
    correlations = tuple(
        EmpiricalCorrelation(engine.deltas[d], k, float(rho[d, k]))
        for d in range(len(engine.deltas)) for k in range(k_total))
    return SpaceFit(model=model, correlations=correlations,
                    ladder_estimates=ladder_estimates,
                    bandwidths=(h_mu, h_g), dimension=dimension,
                    deltas=engine.deltas)


def make_fit_closure(config: PipelineConfig):
    """A (dataset, K) -> SpaceModel closure with per-dataset design caching.

    Cross-validation refits the same training design for several component
    counts; caching the engine keeps the surface smoothing cost per fold
    instead of per (fold, K) pair.
    """
    cache: dict[int, FitEngine] = {}

    def fit(train: FunctionalDataset, n_components: int) -> SpaceModel:
        key = id(train)
        if key not in cache:
            coords = train.coords()
            dimension = infer_dimension(coords)
            grid = make_grid(train.time_domain, config.grid_points)
            h_mu, h_g, _ = select_bandwidths(train, grid, config)
            deltas, _ = delta_set_for(coords, dimension, config.max_ladder)
            cache.clear()          # folds are visited one at a time
            cache[key] = FitEngine(train, grid, h_mu, h_g, deltas,
                                   ball_radius=config.ball_radius)
        sub_config = replace(config, n_components=n_components)
        return fit_space_model(train, sub_config, engine=cache[key]).model

    return fit
