"""Joint score covariance, BLUP score estimation, curve reconstruction,
and the Gaussian confidence intervals/bands built on the score-error
covariance.

Scores are stacked curve-major: entry i*K + k is component k of curve i.
The separable model exploits the Kronecker structure when inverting (the
two small factors are inverted, never the assembled product); the
nonseparable model materializes the full matrix, which is fine at the
scale this package targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import chi2, norm

from ._linalg import jittered_cho_factor, jittered_inv
from .data_model import EvalGrid, FunctionalDataset, Location
from .eigen_analysis import EigenSystem
from .errors import ConditioningError, InvalidArgumentError
from .matern import MaternParams, correlation_matrix


@dataclass(frozen=True)
class SpaceModel:
    """Fitted model: eigen system plus one correlation model per component."""

    eigen: EigenSystem
    matern: tuple[MaternParams, ...]
    separable: bool

    def __post_init__(self):
        object.__setattr__(self, "matern", tuple(self.matern))
        if len(self.matern) != self.eigen.n_components:
            raise InvalidArgumentError(
                f"need one correlation model per component: "
                f"{len(self.matern)} != {self.eigen.n_components}")
        if self.separable and any(p != self.matern[0] for p in self.matern):
            raise InvalidArgumentError(
                "separable models must share one correlation parameter set")

    @property
    def n_components(self) -> int:
        return self.eigen.n_components


@dataclass(frozen=True)
class ScoreEstimate:
    """BLUP scores (N x K) and the score-error covariance (NK x NK)."""

    scores: np.ndarray
    score_error_cov: np.ndarray | None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if self.score_error_cov is not None:
            cov = np.asarray(self.score_error_cov, dtype=float)
            cov = 0.5 * (cov + cov.T)
            cov.setflags(write=False)
            object.__setattr__(self, "score_error_cov", cov)

    @property
    def n_curves(self) -> int:
        return int(self.scores.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.scores.shape[1])

    def error_block(self, i: int) -> np.ndarray:
        """The K x K error-covariance block of curve ``i``."""
        if self.score_error_cov is None:
            raise InvalidArgumentError("score error covariance was not computed")
        k = self.n_components
        return self.score_error_cov[i * k:(i + 1) * k, i * k:(i + 1) * k]


def _coords_of(locations: Sequence[Location]) -> np.ndarray:
    return np.array([[loc.x, loc.y] for loc in locations], dtype=float)


def score_covariance(model: SpaceModel, locations: Sequence[Location],
                     identity_correlation: bool = False) -> np.ndarray:
    """Joint covariance of all stacked scores.

    Separable: the spatial correlation Kronecker the eigenvalue diagonal.
    Nonseparable: per-pair diagonal blocks of component-wise correlations.
    The result is validated to be positive definite within the jitter
    budget (the unjittered matrix is returned).
    """
    n = len(locations)
    lam = model.eigen.eigenvalues
    k = model.n_components
    if identity_correlation:
        out = np.kron(np.eye(n), np.diag(lam))
    elif model.separable:
        rho = correlation_matrix(model.matern[0], _coords_of(locations))
        out = np.kron(rho, np.diag(lam))
    else:
        out = np.zeros((n * k, n * k))
        coords = _coords_of(locations)
        for kk in range(k):
            out[kk::k, kk::k] = lam[kk] * correlation_matrix(model.matern[kk],
                                                             coords)
    jittered_cho_factor(out, "score covariance")
    return out


def _design(model: SpaceModel, data: FunctionalDataset):
    """Block-diagonal eigenfunction design, centered responses, slices."""
    n = data.n_locations
    k = model.n_components
    n_obs = data.pooled_times.size
    phi = np.zeros((n_obs, n * k))
    for i in range(n):
        s = data.curve_slices[i]
        phi[s, i * k:(i + 1) * k] = model.eigen.functions_at(data.pooled_times[s])
    resid = data.pooled_values - model.eigen.mean_at(data.pooled_times)
    return phi, resid


def _sigma_inverse(model: SpaceModel, data: FunctionalDataset,
                   identity_correlation: bool) -> np.ndarray:
    """Inverse score covariance, exploiting structure where it exists."""
    n = data.n_locations
    lam = model.eigen.eigenvalues
    if np.any(lam <= 0.0):
        raise ConditioningError(
            "score covariance is singular: zero eigenvalue in the model")
    lam_inv = np.diag(1.0 / lam)
    if identity_correlation:
        return np.kron(np.eye(n), lam_inv)
    if model.separable:
        rho = correlation_matrix(model.matern[0], data.coords())
        return np.kron(jittered_inv(rho, "spatial correlation"), lam_inv)
    sigma = score_covariance(model, data.locations)
    return jittered_inv(sigma, "score covariance")


def blup_scores(model: SpaceModel, data: FunctionalDataset,
                identity_correlation: bool = False, method: str = "auto",
                error_cov: bool = True) -> ScoreEstimate:
    """Best linear unbiased prediction of all scores jointly.

    ``method="woodbury"`` solves the transformed system
    (sigma2 * Sigma^-1 + Phi' Phi) xi = Phi' (y - mu), whose size is the
    score count rather than the observation count; it requires sigma2 > 0.
    ``method="direct"`` solves in observation space,
    xi = Sigma Phi' (Phi Sigma Phi' + sigma2 I)^-1 (y - mu), and falls back
    to the pseudo-inverse when sigma2 = 0. ``"auto"`` picks woodbury when
    sigma2 > 0. The score-error covariance uses the same factorization.
    """
    if method not in ("auto", "woodbury", "direct"):
        raise InvalidArgumentError(f"unknown method {method!r}")
    sigma2 = model.eigen.sigma2
    if method == "auto":
        method = "woodbury" if sigma2 > 0.0 else "direct"
    if method == "woodbury" and sigma2 <= 0.0:
        raise InvalidArgumentError("woodbury form requires sigma2 > 0")
    phi, resid = _design(model, data)
    n, k = data.n_locations, model.n_components

    if method == "woodbury":
        sig_inv = _sigma_inverse(model, data, identity_correlation)
        a = sigma2 * sig_inv + phi.T @ phi
        factor, _ = jittered_cho_factor(a, "transformed BLUP system")
        flat = cho_solve(factor, phi.T @ resid)
        h_cov = sigma2 * cho_solve(factor, np.eye(n * k)) if error_cov else None
    else:
        sigma = score_covariance(model, data.locations, identity_correlation)
        gram = phi @ sigma @ phi.T
        if sigma2 > 0.0:
            gram = gram + sigma2 * np.eye(gram.shape[0])
            factor, _ = jittered_cho_factor(gram, "observation covariance")
            cross = cho_solve(factor, phi @ sigma)
        else:
            cross = np.linalg.pinv(gram, rcond=1e-12) @ (phi @ sigma)
        flat = cross.T @ resid
        h_cov = sigma - sigma @ phi.T @ cross if error_cov else None

    return ScoreEstimate(scores=flat.reshape(n, k), score_error_cov=h_cov)


def reconstruct(model: SpaceModel, est: ScoreEstimate,
                grid: EvalGrid | None = None) -> np.ndarray:
    """Reconstructed trajectories on the grid: mean plus score-weighted
    eigenfunctions, one row per curve."""
    if grid is None or grid is model.eigen.grid:
        mean = model.eigen.mean
        funcs = model.eigen.eigenfunctions
    else:
        mean = np.interp(grid.points, model.eigen.grid.points, model.eigen.mean)
        funcs = np.stack([np.interp(grid.points, model.eigen.grid.points, f)
                          for f in model.eigen.eigenfunctions])
    if est.n_components != model.n_components:
        raise InvalidArgumentError("estimate and model component counts differ")
    return mean[None, :] + est.scores @ funcs


def pointwise_interval(model: SpaceModel, est: ScoreEstimate, i: int,
                       t_index: int, level: float) -> tuple[float, float]:
    """Pointwise Gaussian confidence interval for curve ``i`` at one grid
    point."""
    _check_level(level)
    k = model.n_components
    phi_t = model.eigen.eigenfunctions[:, t_index]
    var = float(phi_t @ est.error_block(i) @ phi_t)
    center = float(model.eigen.mean[t_index] + est.scores[i] @ phi_t)
    half = norm.ppf(1.0 - (1.0 - level) / 2.0) * np.sqrt(max(var, 0.0))
    return center - half, center + half


def simultaneous_band(model: SpaceModel, est: ScoreEstimate, i: int,
                      level: float) -> np.ndarray:
    """Simultaneous band over the whole grid, shape (M, 2).

    The half-width uses the chi-square quantile with K degrees of freedom,
    so the band is at least as wide as the pointwise interval everywhere.
    """
    _check_level(level)
    funcs = model.eigen.eigenfunctions
    block = est.error_block(i)
    var = np.einsum("km,kl,lm->m", funcs, block, funcs)
    center = model.eigen.mean + est.scores[i] @ funcs
    half = np.sqrt(chi2.ppf(level, df=model.n_components)
                   * np.maximum(var, 0.0))
    return np.stack([center - half, center + half], axis=1)


def score_region(est: ScoreEstimate, contrasts: np.ndarray,
                 level: float) -> np.ndarray:
    """Simultaneous intervals for linear combinations of all scores.

    ``contrasts`` is d x (N*K), full row rank; returns (d, 2) bounds with
    the chi-square(d) quantile.
    """
    _check_level(level)
    contrasts = np.atleast_2d(np.asarray(contrasts, dtype=float))
    d = contrasts.shape[0]
    if np.linalg.matrix_rank(contrasts) < d:
        raise InvalidArgumentError("contrasts must have full row rank")
    if est.score_error_cov is None:
        raise InvalidArgumentError("score error covariance was not computed")
    center = contrasts @ est.scores.reshape(-1)
    spread = np.einsum("ij,jk,ik->i", contrasts, est.score_error_cov, contrasts)
    half = np.sqrt(chi2.ppf(level, df=d) * np.maximum(spread, 0.0))
    return np.stack([center - half, center + half], axis=1)


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError(f"level must be in (0, 1), got {level}")
