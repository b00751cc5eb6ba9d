import math

import numpy as np
import pytest
from scipy.stats import chi2, norm

from space_fda import (EigenSystem, FunctionalDataset, Location, MaternParams,
                       Observation, ScoreEstimate, SpaceModel, blup_scores,
                       make_grid, pointwise_interval, reconstruct,
                       score_covariance, score_region, simultaneous_band)
from space_fda.errors import InvalidArgumentError
from space_fda.matern import correlation_matrix

from conftest import dataset_from_arrays, line_coords


def analytic_system(grid, lam=(3.679, 1.353), sigma2=0.25, mean=None):
    funcs = np.stack([np.ones(grid.m),
                      np.sqrt(2.0) * np.sin(2 * np.pi * grid.points)])
    mean = np.zeros(grid.m) if mean is None else mean
    return EigenSystem(grid=grid, mean=mean, eigenfunctions=funcs,
                       eigenvalues=np.asarray(lam, dtype=float), sigma2=sigma2)


def build_model(grid, zeta=5.0, sigma2=0.25, separable=True, lam=(3.679, 1.353),
                params=None):
    eigen = analytic_system(grid, lam=lam, sigma2=sigma2)
    if params is None:
        shared = MaternParams(alpha=0.0, delta=1.0, zeta=zeta, nu=0.5)
        params = (shared, shared)
    return SpaceModel(eigen=eigen, matern=tuple(params), separable=separable)


def simulate_sparse(model, coords, n_obs, rng, sigma=None):
    """Draw correlated scores and sparse observations from the model."""
    grid = model.eigen.grid
    lam = model.eigen.eigenvalues
    n = len(coords)
    k_total = len(lam)
    sigma = math.sqrt(model.eigen.sigma2) if sigma is None else sigma
    scores = np.zeros((n, k_total))
    for k in range(k_total):
        rho = correlation_matrix(model.matern[k], np.asarray(coords, dtype=float))
        chol = np.linalg.cholesky(lam[k] * rho + 1e-12 * np.eye(n))
        scores[:, k] = chol @ rng.standard_normal(n)
    truth = model.eigen.mean[None, :] + scores @ model.eigen.eigenfunctions
    times, values = [], []
    for i in range(n):
        idx = rng.choice(grid.m, size=n_obs, replace=False)
        times.append(grid.points[idx])
        values.append(truth[i, idx] + sigma * rng.standard_normal(n_obs))
    data = dataset_from_arrays(coords, times, values)
    return data, truth, scores


class TestScoreCovariance:
    def test_identity_correlation_block_diagonal(self, unit_grid):
        model = build_model(unit_grid)
        locs = [Location(i, 0.0, float(i)) for i in range(4)]
        cov = score_covariance(model, locs, identity_correlation=True)
        np.testing.assert_allclose(
            cov, np.kron(np.eye(4), np.diag(model.eigen.eigenvalues)),
            atol=1e-14)

    def test_single_curve_is_lambda(self, unit_grid):
        model = build_model(unit_grid)
        cov = score_covariance(model, [Location(0, 0.0, 0.0)])
        np.testing.assert_allclose(cov, np.diag(model.eigen.eigenvalues),
                                   atol=1e-14)

    def test_separable_and_nonseparable_agree_with_shared_params(self, unit_grid):
        locs = [Location(i, 0.0, float(i)) for i in range(5)]
        sep = build_model(unit_grid, separable=True)
        nonsep = SpaceModel(eigen=sep.eigen, matern=sep.matern, separable=False)
        np.testing.assert_allclose(score_covariance(sep, locs),
                                   score_covariance(nonsep, locs), atol=1e-12)

    def test_symmetric_unit_diagonal_in_rho(self, unit_grid):
        model = build_model(unit_grid, zeta=3.0)
        locs = [Location(i, float(i % 3), float(i // 3)) for i in range(6)]
        cov = score_covariance(model, locs)
        np.testing.assert_allclose(cov, cov.T, atol=0)
        lam = model.eigen.eigenvalues
        for i in range(6):
            np.testing.assert_allclose(np.diag(cov)[2 * i:2 * i + 2], lam)


class TestBlupScores:
    def test_identity_correlation_reduces_to_per_curve_estimator(self, unit_grid,
                                                                  rng):
        model = build_model(unit_grid, sigma2=0.25)
        coords = line_coords(6)
        data, _, _ = simulate_sparse(model, coords, 7, rng)
        est = blup_scores(model, data, identity_correlation=True)
        lam = np.diag(model.eigen.eigenvalues)
        sigma2 = model.eigen.sigma2
        for i in range(6):
            t, y = data.curve(i)
            phi = model.eigen.functions_at(t)
            resid = y - model.eigen.mean_at(t)
            # independent-curves conditional expectation, one curve at a time
            cov_y = phi @ lam @ phi.T + sigma2 * np.eye(t.size)
            expected = lam @ phi.T @ np.linalg.solve(cov_y, resid)
            np.testing.assert_allclose(est.scores[i], expected, atol=1e-10)

    def test_direct_and_woodbury_agree(self, unit_grid, rng):
        for separable in (True, False):
            model = build_model(unit_grid, zeta=4.0, sigma2=0.2,
                                separable=separable)
            coords = line_coords(5)
            data, _, _ = simulate_sparse(model, coords, 6, rng)
            wood = blup_scores(model, data, method="woodbury")
            direct = blup_scores(model, data, method="direct")
            scale = np.max(np.abs(direct.scores))
            assert np.max(np.abs(wood.scores - direct.scores)) <= 1e-8 * scale
            h_scale = max(np.max(np.abs(direct.score_error_cov)), 1e-12)
            assert np.max(np.abs(wood.score_error_cov
                                 - direct.score_error_cov)) <= 1e-8 * h_scale

    def test_sigma_zero_interpolates_in_span(self, unit_grid, rng):
        # K >= observations per curve: reconstruction passes through the data
        model = build_model(unit_grid, sigma2=0.0)
        coords = line_coords(4)
        data, truth, scores = simulate_sparse(model, coords, 2, rng, sigma=0.0)
        est = blup_scores(model, data, method="direct")
        recon = reconstruct(model, est)
        for i in range(4):
            t, y = data.curve(i)
            approx = np.interp(t, unit_grid.points, recon[i])
            np.testing.assert_allclose(approx, y, atol=1e-6)

    def test_shrinkage_with_single_observation(self, unit_grid, rng):
        model = build_model(unit_grid, sigma2=0.3)
        coords = line_coords(8)
        data, _, _ = simulate_sparse(model, coords, 1, rng)
        est = blup_scores(model, data, identity_correlation=True)
        for i in range(8):
            t, y = data.curve(i)
            phi = model.eigen.functions_at(t)[0]
            resid = float(y[0] - model.eigen.mean_at(t)[0])
            for k in range(2):
                if abs(phi[k]) > 1e-8:
                    assert abs(est.scores[i, k]) <= abs(resid / phi[k]) + 1e-12

    def test_error_cov_symmetric_nonnegative_diag(self, unit_grid, rng):
        model = build_model(unit_grid, zeta=6.0, sigma2=0.4, separable=False)
        data, _, _ = simulate_sparse(model, line_coords(5), 4, rng)
        est = blup_scores(model, data)
        h = est.score_error_cov
        np.testing.assert_allclose(h, h.T, atol=1e-10)
        assert np.all(np.diag(h) >= -1e-12)


class TestReconstruct:
    def test_zero_scores_give_mean(self, unit_grid):
        mean = np.cos(2 * np.pi * unit_grid.points)
        eigen = analytic_system(unit_grid, mean=mean)
        shared = MaternParams(alpha=0.0, delta=1.0, zeta=5.0, nu=0.5)
        model = SpaceModel(eigen=eigen, matern=(shared, shared), separable=True)
        est = ScoreEstimate(scores=np.zeros((3, 2)), score_error_cov=None)
        recon = reconstruct(model, est)
        for row in recon:
            np.testing.assert_allclose(row, mean, atol=0)

    def test_exactly_linear_in_scores(self, unit_grid, rng):
        model = build_model(unit_grid)
        scores = rng.standard_normal((4, 2))
        est1 = ScoreEstimate(scores=scores, score_error_cov=None)
        est3 = ScoreEstimate(scores=3.0 * scores, score_error_cov=None)
        r1 = reconstruct(model, est1) - model.eigen.mean[None, :]
        r3 = reconstruct(model, est3) - model.eigen.mean[None, :]
        np.testing.assert_allclose(r3, 3.0 * r1, atol=1e-12)


class TestIntervals:
    def _model_and_estimate(self, grid, rng, sigma2=0.25):
        model = build_model(grid, sigma2=sigma2)
        data, truth, _ = simulate_sparse(model, line_coords(6), 5, rng)
        return model, blup_scores(model, data), truth

    def test_zero_variance_degenerate_interval(self, unit_grid):
        model = build_model(unit_grid)
        est = ScoreEstimate(scores=np.zeros((2, 2)),
                            score_error_cov=np.zeros((4, 4)))
        lo, hi = pointwise_interval(model, est, 0, 10, 0.95)
        assert lo == hi == pytest.approx(model.eigen.mean[10])

    def test_gaussian_quantile_half_width(self, unit_grid):
        model = build_model(unit_grid)
        est = ScoreEstimate(scores=np.zeros((1, 2)),
                            score_error_cov=np.eye(2))
        lo, hi = pointwise_interval(model, est, 0, 0, 0.95)
        phi_t = model.eigen.eigenfunctions[:, 0]
        v = float(phi_t @ phi_t)
        assert (hi - lo) / 2 == pytest.approx(1.959964 * math.sqrt(v), abs=1e-5)

    def test_band_at_least_as_wide_as_interval(self, unit_grid, rng):
        model, est, _ = self._model_and_estimate(unit_grid, rng)
        band = simultaneous_band(model, est, 2, 0.95)
        for m in range(unit_grid.m):
            lo, hi = pointwise_interval(model, est, 2, m, 0.95)
            assert band[m, 0] <= lo + 1e-12
            assert band[m, 1] >= hi - 1e-12

    def test_band_chi2_ratio_for_k2(self, unit_grid, rng):
        model, est, _ = self._model_and_estimate(unit_grid, rng)
        band = simultaneous_band(model, est, 0, 0.95)
        m = 13
        lo, hi = pointwise_interval(model, est, 0, m, 0.95)
        ratio = (band[m, 1] - band[m, 0]) / (hi - lo)
        assert ratio == pytest.approx(
            math.sqrt(chi2.ppf(0.95, 2)) / norm.ppf(0.975), abs=1e-9)

    def test_zero_variance_band(self, unit_grid):
        model = build_model(unit_grid)
        est = ScoreEstimate(scores=np.zeros((1, 2)),
                            score_error_cov=np.zeros((2, 2)))
        band = simultaneous_band(model, est, 0, 0.95)
        np.testing.assert_allclose(band[:, 0], band[:, 1], atol=0)

    def test_level_validation(self, unit_grid):
        model = build_model(unit_grid)
        est = ScoreEstimate(scores=np.zeros((1, 2)), score_error_cov=np.eye(2))
        with pytest.raises(InvalidArgumentError):
            pointwise_interval(model, est, 0, 0, 1.5)

    def test_pointwise_coverage(self, unit_grid):
        # Monte Carlo: nominal 95% coverage of the true curve at grid points
        rng = np.random.default_rng(99)
        model = build_model(unit_grid, zeta=4.0, sigma2=0.25)
        hits = total = 0
        for _ in range(15):
            data, truth, _ = simulate_sparse(model, line_coords(20), 5, rng)
            est = blup_scores(model, data)
            for i in range(20):
                for m in (10, 35, 60, 85):
                    lo, hi = pointwise_interval(model, est, i, m, 0.95)
                    hits += lo <= truth[i, m] <= hi
                    total += 1
        coverage = hits / total
        assert 0.90 <= coverage <= 0.99


class TestScoreRegion:
    def test_single_contrast_matches_chi2_one(self, unit_grid):
        est = ScoreEstimate(scores=np.arange(4.0).reshape(2, 2),
                            score_error_cov=np.eye(4))
        contrast = np.zeros((1, 4))
        contrast[0, 2] = 1.0
        region = score_region(est, contrast, 0.95)
        half = math.sqrt(chi2.ppf(0.95, 1))
        assert region[0, 0] == pytest.approx(2.0 - half)
        assert region[0, 1] == pytest.approx(2.0 + half)

    def test_two_contrast_half_width(self, unit_grid):
        est = ScoreEstimate(scores=np.zeros((2, 2)), score_error_cov=np.eye(4))
        contrasts = np.eye(4)[:2]
        region = score_region(est, contrasts, 0.95)
        np.testing.assert_allclose(region[:, 1], math.sqrt(5.991464547107979),
                                   atol=1e-6)

    def test_rank_deficient_rejected(self):
        est = ScoreEstimate(scores=np.zeros((2, 2)), score_error_cov=np.eye(4))
        contrasts = np.ones((2, 4))
        with pytest.raises(InvalidArgumentError):
            score_region(est, contrasts, 0.95)

    def test_joint_coverage(self, unit_grid):
        rng = np.random.default_rng(123)
        model = build_model(unit_grid, zeta=4.0, sigma2=0.25)
        contrasts = np.eye(12)[:3]
        hits = total = 0
        for _ in range(40):
            data, truth, scores = simulate_sparse(model, line_coords(6), 5, rng)
            est = blup_scores(model, data)
            region = score_region(est, contrasts, 0.95)
            target = contrasts @ scores.reshape(-1)
            ok = np.all((region[:, 0] <= target) & (target <= region[:, 1]))
            hits += ok
            total += 1
        assert hits / total >= 0.90
