"""Eigen decomposition of smoothed surfaces and empirical spatial correlations.

Surfaces are discretized on the evaluation grid, so the eigen problem is a
symmetric matrix decomposition adjusted for the grid step: matrix
eigenvalues are scaled by the step h and eigenvectors by 1/sqrt(h), giving
eigenfunctions with unit L2 norm under grid quadrature. Empirical spatial
correlations are the ratio of matched cross-surface eigenvalues to the
zero-separation eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import EvalGrid
from .errors import (ConditioningError, DegenerateEigenvalueError,
                     InvalidArgumentError)
from .smoothing import Surface
from .spatial_structure import SeparationStructure, SeparationVector


@dataclass(frozen=True)
class EigenSystem:
    """Grid, mean, orthonormal eigenfunctions, eigenvalues, noise variance.

    Eigenfunctions are rows of a K x M matrix with unit L2 norm under grid
    quadrature; eigenvalues are nonincreasing and nonnegative (negative
    smoothing artifacts are truncated at construction time by the pipeline).
    """

    grid: EvalGrid
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    sigma2: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        funcs = np.atleast_2d(np.asarray(self.eigenfunctions, dtype=float))
        vals = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if mean.shape != (self.grid.m,):
            raise InvalidArgumentError("mean length must match the grid")
        if funcs.shape != (vals.shape[0], self.grid.m):
            raise InvalidArgumentError(
                f"eigenfunctions must be K x M, got {funcs.shape}")
        if np.any(vals < 0.0) or np.any(np.diff(vals) > 1e-12):
            raise InvalidArgumentError(
                "eigenvalues must be nonnegative and nonincreasing")
        if self.sigma2 < 0.0:
            raise InvalidArgumentError("sigma2 must be nonnegative")
        for arr in (mean, funcs, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigenfunctions", funcs)
        object.__setattr__(self, "eigenvalues", vals)

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.shape[0])

    def functions_at(self, times: np.ndarray) -> np.ndarray:
        """Eigenfunctions linearly interpolated at arbitrary times, (n, K)."""
        times = np.asarray(times, dtype=float)
        out = np.empty((times.shape[0], self.n_components))
        for k in range(self.n_components):
            out[:, k] = np.interp(times, self.grid.points, self.eigenfunctions[k])
        return out

    def mean_at(self, times: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(times, dtype=float), self.grid.points, self.mean)


@dataclass(frozen=True)
class EmpiricalCorrelation:
    """Estimated spatial correlation of component ``k`` at one separation."""

    delta: SeparationVector
    k: int
    rho_hat: float


def _fix_signs(funcs: np.ndarray, h: float) -> np.ndarray:
    """Deterministic sign: nonnegative grid integral, falling back to the
    first coordinate that is clearly nonzero."""
    out = funcs.copy()
    for k in range(out.shape[0]):
        integral = out[k].sum() * h
        if abs(integral) > 1e-10:
            sign = 1.0 if integral > 0 else -1.0
        else:
            nz = np.nonzero(np.abs(out[k]) > 1e-10)[0]
            sign = 1.0 if nz.size == 0 or out[k, nz[0]] > 0 else -1.0
        out[k] *= sign
    return out


def eigendecompose(surface: Surface, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenvalues/eigenfunctions of a (symmetrized) surface.

    Returns ``n_components`` pairs ordered by descending eigenvalue; values
    carry the grid-step scaling and may be negative for noisy surfaces.
    """
    m = surface.grid.m
    if n_components < 1 or n_components > m:
        raise InvalidArgumentError(
            f"n_components must be in [1, {m}], got {n_components}")
    sym = 0.5 * (surface.values + surface.values.T)
    w, u = np.linalg.eigh(sym)
    order = np.argsort(w)[::-1][:n_components]
    h = surface.grid.step
    values = w[order] * h
    funcs = _fix_signs(u[:, order].T / np.sqrt(h), h)
    return values, funcs


def build_eigensystem(grid: EvalGrid, mean: np.ndarray, surface: Surface,
                      n_components: int, sigma2: float) -> EigenSystem:
    """Base eigen system from the zero-separation surface.

    Negative eigenvalues are finite-sample smoothing artifacts and are
    truncated to zero.
    """
    values, funcs = eigendecompose(surface, n_components)
    return EigenSystem(grid=grid, mean=np.asarray(mean, dtype=float),
                       eigenfunctions=funcs,
                       eigenvalues=np.maximum(values, 0.0), sigma2=sigma2)


def match_eigenpairs(base: EigenSystem, cross_vals: np.ndarray,
                     cross_funcs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Align cross-surface eigenpairs to base component indices by shape.

    Cross eigenfunctions are assigned greedily (in the given, descending
    eigenvalue order) to the unused base index with the largest absolute
    quadrature inner product; matched functions are sign-aligned with their
    base eigenfunction. Robust to value reordering across separations.
    """
    cross_vals = np.asarray(cross_vals, dtype=float)
    cross_funcs = np.atleast_2d(np.asarray(cross_funcs, dtype=float))
    k_total = base.n_components
    if cross_vals.shape[0] != k_total or cross_funcs.shape[0] != k_total:
        raise InvalidArgumentError("cross system size must match the base")
    h = base.grid.step
    overlaps = cross_funcs @ base.eigenfunctions.T * h      # (K cross, K base)
    aligned_vals = np.zeros(k_total)
    aligned_funcs = np.zeros_like(cross_funcs)
    used = np.zeros(k_total, dtype=bool)
    for j in range(k_total):
        row = np.abs(overlaps[j])
        row = np.where(used, -np.inf, row)
        k = int(np.argmax(row))
        used[k] = True
        sign = 1.0 if overlaps[j, k] >= 0 else -1.0
        aligned_vals[k] = cross_vals[j]
        aligned_funcs[k] = sign * cross_funcs[j]
    return aligned_vals, aligned_funcs


def empirical_correlations(base: EigenSystem,
                           structures: Sequence[SeparationStructure],
                           surfaces: Sequence[Surface]) -> list[EmpiricalCorrelation]:
    """Eigenvalue-ratio correlation estimates for each separation structure.

    The zero separation is 1 by definition; other ratios are clipped into
    [-1, 1] (finite samples can push the raw ratio outside).
    """
    if len(structures) != len(surfaces):
        raise InvalidArgumentError("structures and surfaces must align")
    k_total = base.n_components
    lam = base.eigenvalues
    floor = 1e-12 * max(float(lam[0]), 1e-300)
    if np.any(lam <= floor):
        bad = int(np.argmax(lam <= floor))
        raise DegenerateEigenvalueError(
            f"base eigenvalue {bad} is not strictly positive ({lam[bad]:.3e})")
    out: list[EmpiricalCorrelation] = []
    for structure, surface in zip(structures, surfaces):
        if structure.delta.is_zero:
            out.extend(EmpiricalCorrelation(structure.delta, k, 1.0)
                       for k in range(k_total))
            continue
        vals, funcs = eigendecompose(surface, k_total)
        matched, _ = match_eigenpairs(base, vals, funcs)
        rho = np.clip(matched / lam, -1.0, 1.0)
        out.extend(EmpiricalCorrelation(structure.delta, k, float(rho[k]))
                   for k in range(k_total))
    return out


def _fourier_basis(grid: EvalGrid, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal Fourier basis on the grid plus curvature penalties.

    Returns (M x size basis matrix, size-vector of integrated squared
    second derivatives). ``size`` must be odd: a constant plus sine/cosine
    pairs.
    """
    if size < 1 or size % 2 == 0:
        raise InvalidArgumentError(f"basis size must be odd, got {size}")
    span = grid.t_max - grid.t_min
    u = (grid.points - grid.t_min) / span
    theta = np.empty((grid.m, size))
    curv = np.zeros(size)
    theta[:, 0] = 1.0 / np.sqrt(span)
    for pair in range(1, (size - 1) // 2 + 1):
        omega = 2.0 * np.pi * pair / span
        theta[:, 2 * pair - 1] = np.sqrt(2.0 / span) * np.sin(omega * span * u)
        theta[:, 2 * pair] = np.sqrt(2.0 / span) * np.cos(omega * span * u)
        curv[2 * pair - 1] = curv[2 * pair] = omega ** 4
    return theta, curv


@dataclass(frozen=True)
class DenseFpcaResult:
    """Penalized-basis fit plus the component system it induces."""

    coefficients: np.ndarray
    scores: np.ndarray
    system: EigenSystem
    penalty: float


def dense_fpca(curves: np.ndarray, grid: EvalGrid, basis_size: int = 23,
               penalty: float | None = None, center: bool = False) -> DenseFpcaResult:
    """Component analysis of densely observed curves via a penalized basis.

    Each curve is fit by penalized least squares in an odd-sized Fourier
    basis (squared error plus ``penalty`` times total squared curvature);
    the component problem then reduces to the eigen decomposition of the
    coefficient cross-product matrix. With ``penalty=None`` the penalty is
    chosen by generalized cross-validation over a log-spaced ladder.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    if curves.shape[1] != grid.m:
        raise InvalidArgumentError("curves must be sampled on the grid")
    theta, curv = _fourier_basis(grid, basis_size)
    h = grid.step
    gram = h * theta.T @ theta
    proj = h * theta.T @ curves.T                            # (size, N)

    def coeffs_for(pen: float) -> np.ndarray:
        a = gram + pen * np.diag(curv)
        try:
            return np.linalg.solve(a, proj).T                # (N, size)
        except np.linalg.LinAlgError:
            raise ConditioningError(
                f"penalized basis system is singular (penalty {pen:.3e})")

    if penalty is None:
        ladder = np.logspace(-12, 0, 13)
        best, best_score = None, np.inf
        for pen in ladder:
            a = gram + pen * np.diag(curv)
            try:
                smoother = theta @ np.linalg.solve(a, h * theta.T)
            except np.linalg.LinAlgError:
                continue
            resid = curves - curves @ smoother.T
            denom = (1.0 - np.trace(smoother) / grid.m) ** 2
            if denom <= 0:
                continue
            score = float(np.mean(resid ** 2) / denom)
            if score < best_score:
                best, best_score = float(pen), score
        if best is None:
            raise ConditioningError("no usable penalty in the GCV ladder")
        penalty = best

    coefs = coeffs_for(float(penalty))
    mean_curve = np.zeros(grid.m)
    work = coefs
    denom_n = curves.shape[0]
    if center:
        col_mean = coefs.mean(axis=0)
        work = coefs - col_mean
        mean_curve = theta @ col_mean
        denom_n = max(1, curves.shape[0] - 1)
    w, u = np.linalg.eigh(work.T @ work)
    order = np.argsort(w)[::-1]
    w = np.maximum(w[order] / denom_n, 0.0)
    u = u[:, order]
    funcs = _fix_signs((theta @ u).T, h)
    # re-derive scores against the sign-fixed functions so x ~ mean + xi . phi
    signs = np.sign(np.sum((theta @ u).T * funcs, axis=1))
    signs[signs == 0] = 1.0
    scores = (work @ u) * signs[None, :]
    system = EigenSystem(grid=grid, mean=mean_curve, eigenfunctions=funcs,
                         eigenvalues=w, sigma2=0.0)
    return DenseFpcaResult(coefficients=coefs, scores=scores, system=system,
                           penalty=float(penalty))
