"""Bootstrap hypothesis tests for separability and isotropy of the score
correlation structure.

Both tests share one machinery: fit the model, estimate scores jointly,
whiten them under the null-constrained correlation, resample whole curves
with replacement in the whitened space, recolor, rebuild observations at
the original design times with fresh noise, refit, and compare the
observed statistic with the bootstrap null distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ._linalg import JITTER_MAX, JITTER_START
from .data_model import FunctionalDataset, make_grid
from .eigen_analysis import EigenSystem
from .errors import (ConditioningError, InvalidArgumentError, SpaceFdaError,
                     UnstableTestError)
from .matern import (FitConfig, MaternParams, anisotropic_matern,
                     correlation_matrix, fit_matern)
from .parallel import parallel_map
from .pipeline import (FitEngine, PipelineConfig, delta_set_for,
                       fit_correlation_models, infer_dimension,
                       resolve_fit_config, select_bandwidths)
from .reconstruction import SpaceModel, blup_scores
from .spatial_structure import SeparationVector


@dataclass(frozen=True)
class Partition:
    """Disjoint groups of component indices covering 0..K-1 (zero-based)."""

    groups: tuple[tuple[int, ...], ...]

    def __init__(self, groups: Sequence[Sequence[int]]):
        normalized = tuple(tuple(sorted(int(k) for k in g)) for g in groups)
        object.__setattr__(self, "groups", normalized)
        flat = [k for g in normalized for k in g]
        if not flat:
            raise InvalidArgumentError("partition cannot be empty")
        if len(set(flat)) != len(flat):
            raise InvalidArgumentError("partition groups must be disjoint")
        if sorted(flat) != list(range(len(flat))):
            raise InvalidArgumentError(
                "partition must cover components 0..K-1 exactly")

    @property
    def n_components(self) -> int:
        return sum(len(g) for g in self.groups)


@dataclass(frozen=True)
class TestResult:
    """Observed statistic, bootstrap null, and the derived decision.

    ``extras`` carries auxiliary per-test quantities (for the isotropy
    test, the observed fitted angles and the bootstrap angle draws useful
    for plotting the null angle distribution).
    """

    statistic_name: str
    observed_stat: float
    null_stats: tuple[float, ...]
    p_value: float
    decision_at: dict
    n_dropped: int
    extras: dict = None

    def __post_init__(self):
        object.__setattr__(self, "null_stats", tuple(self.null_stats))
        if self.extras is None:
            object.__setattr__(self, "extras", {})


def _whitening_eigh(rho: np.ndarray, label: str):
    """Eigendecomposition of a correlation matrix with jitter escalation."""
    vals, vecs = np.linalg.eigh(0.5 * (rho + rho.T))
    scale = float(np.mean(np.diag(rho)))
    jitter = 0.0
    while np.min(vals) <= 0.0:
        jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX * scale:
            raise ConditioningError(
                f"{label} is not positive definite within the jitter budget")
        vals = vals + jitter
    return vals, vecs


def decorrelate_scores(scores: np.ndarray, rho: np.ndarray,
                       lam: float) -> np.ndarray:
    """Whiten one component's scores under its fitted spatial correlation.

    Uses the transform built from the eigendecomposition of the
    correlation matrix scaled by the component variance, so the whitened
    vector has identity covariance when the model holds.
    """
    if lam <= 0.0 or not math.isfinite(lam):
        raise InvalidArgumentError(f"component variance must be positive, got {lam}")
    vals, vecs = _whitening_eigh(rho, "score correlation")
    return (vecs / np.sqrt(lam * vals)).T @ np.asarray(scores, dtype=float)


def recorrelate_scores(z: np.ndarray, rho: np.ndarray, lam: float) -> np.ndarray:
    """Exact inverse of :func:`decorrelate_scores` (same decomposition)."""
    if lam <= 0.0 or not math.isfinite(lam):
        raise InvalidArgumentError(f"component variance must be positive, got {lam}")
    vals, vecs = _whitening_eigh(rho, "score correlation")
    return (vecs * np.sqrt(lam * vals)) @ np.asarray(z, dtype=float)


@dataclass(frozen=True)
class BootstrapTestConfig:
    """Estimation settings shared by the observed fit and every refit."""

    bandwidth_mean: float | None = None
    bandwidth_surface: float | None = None
    grid_points: int = 51
    max_ladder: int = 3
    nested_ladders: bool = False
    ball_radius: float = 0.0
    trim: float = 0.2
    fit: FitConfig = None
    delta_eval: SeparationVector | None = None
    levels: tuple[float, ...] = (0.05,)
    max_drop_rate: float = 0.1
    threads: int | None = None

    def __post_init__(self):
        if self.fit is None:
            object.__setattr__(self, "fit", FitConfig(multistart=4))


def _pipeline_config(cfg: BootstrapTestConfig) -> PipelineConfig:
    return PipelineConfig(bandwidth_mean=cfg.bandwidth_mean,
                          bandwidth_surface=cfg.bandwidth_surface,
                          grid_points=cfg.grid_points,
                          max_ladder=cfg.max_ladder,
                          ball_radius=cfg.ball_radius, trim=cfg.trim,
                          fit=cfg.fit)


class _TestHarness:
    """Shared observed-fit state and the per-replicate refit machinery."""

    def __init__(self, data: FunctionalDataset, n_components: int,
                 cfg: BootstrapTestConfig):
        self.data = data
        self.cfg = cfg
        self.k_total = n_components
        coords = data.coords()
        self.dimension = infer_dimension(coords)
        grid = make_grid(data.time_domain, cfg.grid_points)
        pipe_cfg = _pipeline_config(cfg)
        h_mu, h_g, _ = select_bandwidths(data, grid, pipe_cfg)
        deltas, prefixes = delta_set_for(coords, self.dimension, cfg.max_ladder)
        self.engine = FitEngine(data, grid, h_mu, h_g, deltas,
                                ball_radius=cfg.ball_radius, keep_kernels=True)
        # a single full-length ladder keeps refits cheap; the observed fit
        # and every bootstrap refit use the same estimator either way
        self.prefixes = prefixes if cfg.nested_ladders else [prefixes[-1]]
        self.fit_cfg = resolve_fit_config(pipe_cfg, self.dimension)
        self.delta_eval = cfg.delta_eval or (deltas[0])

        self.mu, resid, self.base, self.rho = self.engine.estimate(
            data.pooled_values, n_components)
        self.sigma2 = self.engine.noise_variance(resid)
        # eigenfunctions and mean at the observation times, for curve synthesis
        self.phi_obs = self.base.functions_at(data.pooled_times)
        self.mu_obs = self.base.mean_at(data.pooled_times)
        self.curve_of_obs = np.concatenate(
            [np.full(s.stop - s.start, i)
             for i, s in enumerate(data.curve_slices)])

    def fit_params(self, rho: np.ndarray,
                   groups: Sequence[Sequence[int]]) -> list[MaternParams]:
        params, _ = fit_correlation_models(self.engine, rho, self.prefixes,
                                           self.fit_cfg, self.cfg.trim, groups)
        return params

    def fit_params_isotropic(self, rho: np.ndarray,
                             groups: Sequence[Sequence[int]]) -> list[MaternParams]:
        iso_cfg = FitConfig(fix_nu=self.fit_cfg.fix_nu, fix_isotropic=True,
                            multistart=self.fit_cfg.multistart,
                            max_iterations=self.fit_cfg.max_iterations,
                            gradient_tolerance=self.fit_cfg.gradient_tolerance)
        params, _ = fit_correlation_models(self.engine, rho, self.prefixes,
                                           iso_cfg, self.cfg.trim, groups)
        return params

    def blup(self, params: Sequence[MaternParams]) -> np.ndarray:
        eigen = EigenSystem(grid=self.engine.grid, mean=self.mu,
                            eigenfunctions=self.base.eigenfunctions,
                            eigenvalues=self.base.eigenvalues,
                            sigma2=self.sigma2)
        model = SpaceModel(eigen=eigen, matern=tuple(params), separable=False)
        return blup_scores(model, self.data, error_cov=False).scores

    def synthesize(self, scores_by_k: dict[int, np.ndarray],
                   kept_scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Bootstrap observations at the original times with fresh noise."""
        values = self.mu_obs.copy()
        for k in range(self.k_total):
            per_curve = scores_by_k.get(k)
            col = kept_scores[:, k] if per_curve is None else per_curve
            values = values + col[self.curve_of_obs] * self.phi_obs[:, k]
        values = values + math.sqrt(self.sigma2) * rng.standard_normal(values.size)
        return values

    def run_bootstrap(self, b_replicates: int, seed: int, resampled_ks,
                      whiteners, kept_scores, statistic) -> tuple[list, int]:
        """Resample-recolor-refit loop.

        Returns the per-replicate statistic payloads (in replicate order,
        regardless of scheduling) and the number of dropped replicates.
        """
        def one(b: int):
            rng = np.random.default_rng([seed, 1000003, b])
            perm = rng.integers(0, self.data.n_locations,
                                self.data.n_locations)
            scores_by_k = {}
            for k in resampled_ks:
                vals, vecs, lam, z = whiteners[k]
                scores_by_k[k] = (vecs * np.sqrt(lam * vals)) @ z[perm]
            values = self.synthesize(scores_by_k, kept_scores, rng)
            try:
                _, _, _, rho_b = self.engine.estimate(values, self.k_total)
                return statistic(rho_b)
            except SpaceFdaError:
                return None

        results = parallel_map(one, range(b_replicates), self.cfg.threads)
        payloads = [s for s in results if s is not None]
        return payloads, b_replicates - len(payloads)


def _finish(name: str, observed: float, nulls: list[float], dropped: int,
            b_replicates: int, cfg: BootstrapTestConfig,
            extras: dict | None = None, tail: str = "upper") -> TestResult:
    if dropped > cfg.max_drop_rate * b_replicates:
        raise UnstableTestError(
            f"{dropped}/{b_replicates} bootstrap replicates failed")
    upper = (1.0 + sum(1 for s in nulls if s >= observed)) / (len(nulls) + 1.0)
    if tail == "upper":
        p_value = upper
    else:
        lower = (1.0 + sum(1 for s in nulls if s <= observed)) / (len(nulls) + 1.0)
        p_value = min(1.0, 2.0 * min(upper, lower))
    decisions = {level: bool(p_value <= level) for level in cfg.levels}
    return TestResult(statistic_name=name, observed_stat=float(observed),
                      null_stats=tuple(nulls), p_value=float(p_value),
                      decision_at=decisions, n_dropped=dropped,
                      extras=extras or {})


def _wrap_angle(alpha: float) -> float:
    """Angle distance to 0 on the circle of period pi."""
    a = alpha % math.pi
    return min(a, math.pi - a)


SEPARABILITY_STATISTICS = ("correlation_rms", "zeta_absdiff", "rho_absdiff",
                           "rho_diff")


def separability_statistic(partition: Partition,
                           delta_eval: SeparationVector,
                           kind: str = "correlation_rms"):
    """Statistic over the fitted per-component parameters.

    ``correlation_rms`` (default, recommended): within-group RMS dispersion
    of fitted correlations at the evaluation separation, summed over
    groups; zero exactly when a group shares one correlation value.
    ``zeta_absdiff`` / ``rho_absdiff``: within-group spread (max minus min)
    of the range parameter or of the fitted correlation. ``rho_diff``: the
    signed correlation difference (first minus last component of each
    group), for two-sided use.
    """
    if kind not in SEPARABILITY_STATISTICS:
        raise InvalidArgumentError(f"unknown statistic {kind!r}")

    def stat(params: Sequence[MaternParams]) -> float:
        total = 0.0
        for group in partition.groups:
            if len(group) < 2:
                continue
            if kind == "zeta_absdiff":
                vals = np.array([params[k].zeta for k in group])
                total += float(vals.max() - vals.min())
                continue
            vals = np.array([anisotropic_matern(delta_eval, params[k])
                             for k in group])
            if kind == "correlation_rms":
                total += float(np.sqrt(np.mean((vals - vals.mean()) ** 2)))
            elif kind == "rho_absdiff":
                total += float(vals.max() - vals.min())
            else:
                total += float(vals[0] - vals[-1])
        return total

    return stat


def separability_test(data: FunctionalDataset, partition_null: Partition,
                      b_replicates: int, seed: int,
                      config: BootstrapTestConfig | None = None,
                      statistic: str = "correlation_rms") -> TestResult:
    """Bootstrap test of shared correlation structure within groups.

    Null: components within each multi-member group of ``partition_null``
    share their correlation parameters. The default statistic is the
    within-group dispersion of fitted correlations at the evaluation
    separation; large values indicate inequality, so the upper tail
    rejects. The parameter-space and correlation-difference variants in
    :data:`SEPARABILITY_STATISTICS` are also available; the signed
    ``rho_diff`` is assessed two-sided against the bootstrap null.
    """
    if b_replicates < 99:
        raise InvalidArgumentError("need at least 99 bootstrap replicates")
    cfg = config or BootstrapTestConfig()
    cfg = replace(cfg, fit=replace(cfg.fit, accept_best=True))
    harness = _TestHarness(data, partition_null.n_components, cfg)
    statistic_from_params = separability_statistic(
        partition_null, harness.delta_eval, statistic)

    # unrestricted per-component fit and the observed statistic
    singles = [[k] for k in range(harness.k_total)]
    params_obs = harness.fit_params(harness.rho, singles)
    observed = statistic_from_params(params_obs)

    # joint scores under the unrestricted fit, then the pooled null fit
    scores = harness.blup(params_obs)
    pooled_groups = [list(g) for g in partition_null.groups if len(g) > 1]
    params_null = harness.fit_params(harness.rho, pooled_groups) \
        if pooled_groups else [None] * harness.k_total
    resampled_ks = [k for g in pooled_groups for k in g]

    coords = data.coords()
    whiteners = {}
    for k in resampled_ks:
        rho_k = correlation_matrix(params_null[k], coords)
        lam_k = float(harness.base.eigenvalues[k])
        vals, vecs = _whitening_eigh(rho_k, f"null correlation, component {k}")
        z = (vecs / np.sqrt(lam_k * vals)).T @ scores[:, k]
        whiteners[k] = (vals, vecs, lam_k, z)

    def replicate_statistic(rho_b: np.ndarray) -> float:
        return statistic_from_params(harness.fit_params(rho_b, singles))

    nulls, dropped = harness.run_bootstrap(b_replicates, seed, resampled_ks,
                                           whiteners, scores,
                                           replicate_statistic)
    tail = "two_sided" if statistic == "rho_diff" else "upper"
    return _finish(statistic, observed, nulls, dropped, b_replicates, cfg,
                   tail=tail)


def isotropy_test(data: FunctionalDataset, partition: Partition,
                  iso_groups: Sequence[int], b_replicates: int, seed: int,
                  config: BootstrapTestConfig | None = None,
                  statistic: str = "log_ratio") -> TestResult:
    """Bootstrap test of isotropic correlation for the selected groups.

    Correlation structure is pooled within every partition group (the
    prior); the null fixes angle 0 and ratio 1 for ``iso_groups`` (indices
    into ``partition.groups``) and refits their range. One-sided upper
    tail; both statistics are nonnegative by construction.

    ``statistic="log_ratio"`` (default) sums the log anisotropy ratios of
    the tested groups. Under an isotropic truth the fitted ratio hugs 1 at
    whatever orientation the noise prefers, so the fitted angle alone is
    uninformative (it is uniform under the null by symmetry); the ratio is
    what carries the evidence. ``statistic="angle"`` sums the absolute
    fitted angles instead and is kept for reference; expect low power
    against mid-range alternatives. Fitted angles for the observed data
    and every bootstrap draw are reported in ``extras`` either way.
    """
    if b_replicates < 99:
        raise InvalidArgumentError("need at least 99 bootstrap replicates")
    if len(iso_groups) == 0:
        raise InvalidArgumentError("iso_groups cannot be empty")
    if statistic not in ("log_ratio", "angle"):
        raise InvalidArgumentError(f"unknown statistic {statistic!r}")
    iso_groups = sorted(set(int(g) for g in iso_groups))
    if any(g < 0 or g >= len(partition.groups) for g in iso_groups):
        raise InvalidArgumentError("iso_groups index outside the partition")
    cfg = config or BootstrapTestConfig()
    cfg = replace(cfg, fit=replace(cfg.fit, accept_best=True))
    harness = _TestHarness(data, partition.n_components, cfg)
    groups = [list(g) for g in partition.groups]
    iso_components = [k for g in iso_groups for k in groups[g]]

    def group_params(params: Sequence[MaternParams]) -> list[MaternParams]:
        return [params[groups[g][0]] for g in iso_groups]

    def stat_value(params: Sequence[MaternParams]) -> float:
        per_group = group_params(params)
        if statistic == "angle":
            return float(sum(_wrap_angle(p.alpha) for p in per_group))
        return float(sum(math.log(p.delta) for p in per_group))

    # prior fit: pooled within every group, anisotropy free
    params_prior = harness.fit_params(harness.rho, groups)
    observed = stat_value(params_prior)
    observed_angles = [p.alpha for p in group_params(params_prior)]
    scores = harness.blup(params_prior)

    # null fit: angle 0, ratio 1 for the tested groups, range refit pooled
    params_null = list(params_prior)
    iso_fits = harness.fit_params_isotropic(
        harness.rho, [groups[g] for g in iso_groups])
    for g in iso_groups:
        for k in groups[g]:
            params_null[k] = iso_fits[k]

    coords = data.coords()
    whiteners = {}
    for k in iso_components:
        rho_k = correlation_matrix(params_null[k], coords)
        lam_k = float(harness.base.eigenvalues[k])
        vals, vecs = _whitening_eigh(rho_k, f"null correlation, component {k}")
        z = (vecs / np.sqrt(lam_k * vals)).T @ scores[:, k]
        whiteners[k] = (vals, vecs, lam_k, z)

    def replicate_statistic(rho_b: np.ndarray):
        params_b = harness.fit_params(rho_b, groups)
        return (stat_value(params_b),
                tuple(p.alpha for p in group_params(params_b)))

    payloads, dropped = harness.run_bootstrap(b_replicates, seed,
                                              iso_components, whiteners,
                                              scores, replicate_statistic)
    nulls = [s for s, _ in payloads]
    name = ("sum of absolute anisotropy angles" if statistic == "angle"
            else "sum of log anisotropy ratios")
    extras = {"observed_angles": tuple(observed_angles),
              "null_angles": tuple(a for _, a in payloads)}
    return _finish(name, observed, nulls, dropped, b_replicates, cfg, extras)
