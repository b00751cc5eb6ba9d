"""Isotropic and geometrically anisotropic Matern correlation, plus fitting.

The correlation family is governed by a range ``zeta`` and smoothness
``nu``; anisotropy enters through a rotation angle ``alpha`` and an axis
stretch ``delta`` applied to the separation vector before the distance is
taken. Parameters are fit to empirical correlations by quasi-Newton least
squares over an unconstrained reparameterization, with multistart because
the objective is multimodal in the angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, kve
from scipy.stats import trim_mean

from .errors import (ConvergenceFailureError, InvalidArgumentError,
                     NoSignalError)
from .spatial_structure import SeparationVector

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class MaternParams:
    """Anisotropy angle/ratio plus range and smoothness for one component.

    Canonical form: ``alpha`` in [0, pi), ``delta`` >= 1. Use
    :func:`canonicalize` to map an equivalent parameterization (the angle
    rotated a quarter turn with the ratio inverted gives the identical
    correlation function) into this box.
    """

    alpha: float
    delta: float
    zeta: float
    nu: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.alpha, self.delta, self.zeta, self.nu))):
            raise InvalidArgumentError("non-finite Matern parameters")
        if not 0.0 <= self.alpha < math.pi:
            raise InvalidArgumentError(f"alpha must be in [0, pi), got {self.alpha}")
        if self.delta < 1.0:
            raise InvalidArgumentError(f"delta must be >= 1, got {self.delta}")
        if self.zeta <= 0.0:
            raise InvalidArgumentError(f"zeta must be positive, got {self.zeta}")
        if self.nu <= 0.0:
            raise InvalidArgumentError(f"nu must be positive, got {self.nu}")

    @property
    def isotropic(self) -> bool:
        return self.delta == 1.0


def canonicalize(alpha: float, delta: float, zeta: float, nu: float) -> MaternParams:
    """Map any (alpha, delta) pair into the identifiable canonical box."""
    if not math.isfinite(delta) or delta <= 0.0:
        raise InvalidArgumentError(f"delta must be positive, got {delta}")
    if delta < 1.0:
        alpha = alpha + 0.5 * math.pi
        delta = 1.0 / delta
    alpha = alpha % math.pi
    if delta == 1.0:
        alpha = 0.0          # angle is unidentifiable on a circle
    return MaternParams(alpha=alpha, delta=delta, zeta=zeta, nu=nu)


@dataclass(frozen=True)
class FitConfig:
    """Controls for the correlation least-squares fit.

    ``accept_best`` returns the best iterate instead of raising when no
    start meets the gradient tolerance; near-flat landscapes (a ratio
    sliding toward 1 in log space) never converge formally yet their best
    iterate is the estimate.
    """

    fix_nu: float | None = 0.5
    fix_isotropic: bool = False
    multistart: int = 8
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    accept_best: bool = False
    delta_max: float = 50.0

    def __post_init__(self):
        if self.multistart < 1:
            raise InvalidArgumentError("multistart must be >= 1")
        if self.fix_nu is not None and self.fix_nu <= 0.0:
            raise InvalidArgumentError("fixed nu must be positive")
        if self.delta_max <= 1.0:
            raise InvalidArgumentError("delta_max must exceed 1")


def matern_correlation(d, zeta: float, nu: float):
    """Matern correlation at distance ``d`` (vectorized).

    Continuous limit 1 at d = 0; the half-integer order 1/2 takes the exact
    exponential fast path, other orders go through the scaled modified
    Bessel function of the second kind in log space for stability.
    """
    d_arr = np.asarray(d, dtype=float)
    if not (math.isfinite(zeta) and zeta > 0.0):
        raise InvalidArgumentError(f"zeta must be positive, got {zeta}")
    if not (math.isfinite(nu) and nu > 0.0):
        raise InvalidArgumentError(f"nu must be positive, got {nu}")
    if np.any(~np.isfinite(d_arr)) or np.any(d_arr < 0.0):
        raise InvalidArgumentError("distances must be finite and nonnegative")
    x = d_arr / zeta
    if nu == 0.5:
        out = np.exp(-x)
    else:
        out = np.ones_like(x)
        pos = x > 0.0
        if np.any(pos):
            xp = x[pos]
            # log of 2^(1-nu)/Gamma(nu) * x^nu * K_nu(x), with K = kve * e^-x
            with np.errstate(divide="ignore"):
                log_val = ((1.0 - nu) * math.log(2.0) - gammaln(nu)
                           + nu * np.log(xp) - xp + np.log(kve(nu, xp)))
            out[pos] = np.exp(log_val)
        out = np.clip(out, 0.0, 1.0)
    if np.isscalar(d) or np.ndim(d) == 0:
        return float(out)
    return out


def anisotropic_distance(delta_vec, alpha: float, delta: float):
    """Norm of the rotated and axis-stretched separation vector."""
    dx, dy = _vec_components(delta_vec)
    if not (math.isfinite(delta) and delta > 0.0):
        raise InvalidArgumentError(f"delta must be positive, got {delta}")
    u = math.cos(alpha) * dx + math.sin(alpha) * dy
    v = -math.sin(alpha) * dx + math.cos(alpha) * dy
    return np.sqrt(delta * u * u + v * v / delta)


def anisotropic_matern(delta_vec, params: MaternParams):
    """Correlation of the anisotropic family at a separation vector.

    Even in the separation: the same value results for the negated vector.
    """
    d = anisotropic_distance(delta_vec, params.alpha, params.delta)
    return matern_correlation(d, params.zeta, params.nu)


def correlation_matrix(params: MaternParams, coords: np.ndarray) -> np.ndarray:
    """Pairwise anisotropic correlations for (N, 2) coordinates."""
    coords = np.asarray(coords, dtype=float)
    dx = coords[:, 0][None, :] - coords[:, 0][:, None]
    dy = coords[:, 1][None, :] - coords[:, 1][:, None]
    d = anisotropic_distance((dx, dy), params.alpha, params.delta)
    return np.asarray(matern_correlation(d, params.zeta, params.nu))


def _vec_components(delta_vec):
    if isinstance(delta_vec, SeparationVector):
        return delta_vec.dx, delta_vec.dy
    dx, dy = delta_vec
    return np.asarray(dx, dtype=float), np.asarray(dy, dtype=float)


# ---------------------------------------------------------------------------
# Least-squares fitting
# ---------------------------------------------------------------------------

def _points_to_arrays(points: Sequence[tuple[SeparationVector, float]]):
    dx = np.array([p[0].dx if isinstance(p[0], SeparationVector) else p[0][0]
                   for p in points], dtype=float)
    dy = np.array([p[0].dy if isinstance(p[0], SeparationVector) else p[0][1]
                   for p in points], dtype=float)
    rho = np.array([p[1] for p in points], dtype=float)
    return dx, dy, rho


def _distinct_directions(dx: np.ndarray, dy: np.ndarray) -> int:
    norms = np.hypot(dx, dy)
    keep = norms > 0
    angles = np.mod(np.arctan2(dy[keep], dx[keep]), math.pi)
    return int(np.unique(np.round(angles, 9)).size)


def _safe_exp(x: float) -> float:
    # line searches can probe absurd log-scale values; keep them finite
    return math.exp(min(x, 500.0))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-min(x, 500.0)))
    z = _safe_exp(x)
    return z / (1.0 + z)


def _b_for_delta(delta: float, delta_max: float) -> float:
    """Inverse of the bounded ratio map, for starting points."""
    frac = min(max((delta - 1.0) / (delta_max - 1.0), 1e-9), 1.0 - 1e-9)
    return math.log(frac / (1.0 - frac))


class _Objective:
    """Sum of squared correlation residuals over an unconstrained space.

    Free coordinates, in order: angle (unbounded, pi-periodic), log range,
    ratio through the bounded map delta = 1 + (delta_max - 1) sigmoid(b)
    (an unbounded ratio lets noisy low-variance components run away along
    a degenerate ridge), log smoothness when nu is free. Analytic gradient
    for the exponential order; central differences otherwise.
    """

    def __init__(self, dx, dy, rho, cfg: FitConfig):
        self.dx, self.dy, self.rho = dx, dy, rho
        self.cfg = cfg
        self.nu_free = cfg.fix_nu is None
        self.n_free = (1 if cfg.fix_isotropic else 3) + (1 if self.nu_free else 0)

    def unpack(self, x: np.ndarray) -> MaternParams:
        if self.cfg.fix_isotropic:
            alpha, delta = 0.0, 1.0
            zeta = _safe_exp(x[0])
            nu = _safe_exp(x[1]) if self.nu_free else self.cfg.fix_nu
        else:
            alpha = x[0] % math.pi
            zeta = _safe_exp(x[1])
            delta = 1.0 + (self.cfg.delta_max - 1.0) * _sigmoid(x[2])
            nu = _safe_exp(x[3]) if self.nu_free else self.cfg.fix_nu
        return canonicalize(alpha, delta, zeta, nu)

    def _parts(self, x: np.ndarray):
        if self.cfg.fix_isotropic:
            alpha, b = 0.0, None
            zeta = _safe_exp(x[0])
            delta = 1.0
            nu = _safe_exp(x[1]) if self.nu_free else self.cfg.fix_nu
        else:
            alpha = x[0]
            zeta = _safe_exp(x[1])
            b = x[2]
            delta = 1.0 + (self.cfg.delta_max - 1.0) * _sigmoid(b)
            nu = _safe_exp(x[3]) if self.nu_free else self.cfg.fix_nu
        u = math.cos(alpha) * self.dx + math.sin(alpha) * self.dy
        v = -math.sin(alpha) * self.dx + math.cos(alpha) * self.dy
        dist = np.sqrt(delta * u * u + v * v / delta)
        fitted = matern_correlation(dist, zeta, nu)
        return alpha, zeta, delta, b, nu, u, v, dist, np.asarray(fitted)

    def value(self, x: np.ndarray) -> float:
        *_, fitted = self._parts(x)
        r = fitted - self.rho
        return float(r @ r)

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        if self.nu_free or self.cfg.fix_nu != 0.5:
            return self.value(x), self._fd_grad(x)
        alpha, zeta, delta, b, nu, u, v, dist, fitted = self._parts(x)
        r = fitted - self.rho
        f = float(r @ r)
        # d rho / d dist = -rho / zeta for the exponential order
        w = 2.0 * r * (-fitted / zeta)
        safe = np.where(dist > 0, dist, 1.0)
        if self.cfg.fix_isotropic:
            g_zeta = float(np.sum(2.0 * r * fitted * dist / zeta))  # d/d log zeta
            return f, np.array([g_zeta])
        dg_dalpha = 2.0 * u * v * (delta - 1.0 / delta)
        ddist_dalpha = np.where(dist > 0, dg_dalpha / (2.0 * safe), 0.0)
        sig = _sigmoid(b)
        ddelta_db = (self.cfg.delta_max - 1.0) * sig * (1.0 - sig)
        dg_db = (u * u - v * v / (delta * delta)) * ddelta_db
        ddist_db = np.where(dist > 0, dg_db / (2.0 * safe), 0.0)
        g_alpha = float(np.sum(w * ddist_dalpha))
        g_zeta = float(np.sum(2.0 * r * fitted * dist / zeta))
        g_b = float(np.sum(w * ddist_db))
        return f, np.array([g_alpha, g_zeta, g_b])

    def _fd_grad(self, x: np.ndarray) -> np.ndarray:
        grad = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            step = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            grad[i] = (self.value(xp) - self.value(xm)) / (2.0 * step)
        return grad


def _starting_points(dx, dy, rho, cfg: FitConfig) -> list[np.ndarray]:
    dists = np.hypot(dx, dy)
    positive = dists[dists > 0]
    d_ref = float(np.median(positive)) if positive.size else 1.0
    zetas = [d_ref, 4.0 * d_ref]
    if cfg.fix_isotropic:
        ladder = np.geomspace(max(d_ref / 4.0, 1e-3), 8.0 * d_ref,
                              max(cfg.multistart, 2))
        starts = [[math.log(z)] for z in ladder[:cfg.multistart]]
    else:
        # near-isotropic anchor first: a single-start fit stays at angle 0
        # unless the data carry a real anisotropy signal
        starts = [[0.0, math.log(zetas[0]), _b_for_delta(1.05, cfg.delta_max)]]
        b_mid = _b_for_delta(1.5, cfg.delta_max)
        for alpha in (0.0, 0.25 * math.pi, 0.5 * math.pi, 0.75 * math.pi):
            for z in zetas:
                starts.append([alpha, math.log(z), b_mid])
        starts = starts[:cfg.multistart] if cfg.multistart <= len(starts) else starts
        extra = 0
        while len(starts) < cfg.multistart:
            starts.append([(extra * 0.1) % math.pi, math.log(zetas[extra % 2]),
                           _b_for_delta(1.3 + 0.3 * extra, cfg.delta_max)])
            extra += 1
    if cfg.fix_nu is None:
        starts = [s + [math.log(0.5)] for s in starts]
    return [np.array(s, dtype=float) for s in starts]


def fit_matern(points: Sequence[tuple[SeparationVector, float]],
               cfg: FitConfig | None = None) -> MaternParams:
    """Least-squares Matern parameters from empirical correlations.

    Minimizes the sum of squared differences between empirical and fitted
    correlations by BFGS over the unconstrained reparameterization, keeping
    the best of ``cfg.multistart`` starts. Raises
    :class:`ConvergenceFailureError` (best candidate attached) if no start
    converges and :class:`NoSignalError` when every correlation is <= 0.
    """
    cfg = cfg or FitConfig()
    dx, dy, rho = _points_to_arrays(points)
    obj = _Objective(dx, dy, rho, cfg)
    if dx.size < obj.n_free:
        raise InvalidArgumentError(
            f"{obj.n_free} free parameters need at least {obj.n_free} points, "
            f"got {dx.size}")
    if not cfg.fix_isotropic and _distinct_directions(dx, dy) < 2:
        raise InvalidArgumentError(
            "anisotropy needs at least 2 distinct separation directions; "
            "fit with fix_isotropic for collinear layouts")
    if np.all(rho <= 0.0):
        raise NoSignalError("all empirical correlations are non-positive")

    best = None
    best_converged = None
    for x0 in _starting_points(dx, dy, rho, cfg):
        res = minimize(obj.value_and_grad, x0, jac=True, method="BFGS",
                       options={"gtol": cfg.gradient_tolerance,
                                "maxiter": cfg.max_iterations})
        if np.all(np.isfinite(res.x)) and math.isfinite(res.fun):
            if best is None or res.fun < best.fun:
                best = res
            if res.success and (best_converged is None
                                or res.fun < best_converged.fun):
                best_converged = res
    if best_converged is None:
        if cfg.accept_best and best is not None:
            return obj.unpack(best.x)
        raise ConvergenceFailureError(
            "no start converged within the iteration budget",
            best=obj.unpack(best.x) if best is not None else None)
    return obj.unpack(best_converged.x)


def fit_pooled(per_k_points: Sequence[Sequence[tuple[SeparationVector, float]]],
               cfg: FitConfig | None = None) -> MaternParams:
    """Fit one parameter set to correlations pooled across components."""
    pooled = [p for pts in per_k_points for p in pts]
    if not pooled:
        raise InvalidArgumentError("nothing to pool")
    return fit_matern(pooled, cfg)


def circular_trimmed_mean_pi(angles: Iterable[float], trim: float) -> float:
    """Trimmed mean of angles with period pi.

    Deviations from the circular mean direction are trimmed on each side,
    averaged, and mapped back. Reduces to the plain trimmed mean for angles
    clustered away from the wrap point.
    """
    a = np.asarray(list(angles), dtype=float)
    z = np.exp(2j * a)
    center = np.angle(np.mean(z))
    dev = np.angle(np.exp(1j * (2.0 * a - center)))
    dev = np.sort(dev)
    cut = int(math.floor(trim * dev.size))
    kept = dev[cut: dev.size - cut] if cut > 0 else dev
    return float(((center + float(np.mean(kept))) / 2.0) % math.pi)


def trimmed_estimate(ladders: Sequence[Sequence[tuple[SeparationVector, float]]],
                     cfg: FitConfig | None = None,
                     trim: float = 0.2) -> MaternParams:
    """Per-ladder fits combined by a per-parameter trimmed mean.

    Ladders that fail to fit are excluded; if all fail, the failure
    propagates. The angle is averaged on the circle of period pi.
    """
    if not 0.0 <= trim < 0.5:
        raise InvalidArgumentError(f"trim must be in [0, 0.5), got {trim}")
    if len(ladders) == 0:
        raise InvalidArgumentError("need at least one ladder")
    cfg = cfg or FitConfig()
    fits: list[MaternParams] = []
    failures: list[Exception] = []
    for ladder in ladders:
        try:
            fits.append(fit_matern(ladder, cfg))
        except (ConvergenceFailureError, NoSignalError, InvalidArgumentError) as exc:
            failures.append(exc)
    if not fits:
        raise ConvergenceFailureError(
            f"every ladder fit failed ({len(failures)} failures; "
            f"first: {failures[0]})")
    if len(fits) == 1:
        return fits[0]
    zeta = float(trim_mean([p.zeta for p in fits], trim))
    delta = float(trim_mean([p.delta for p in fits], trim))
    nu = float(trim_mean([p.nu for p in fits], trim))
    alpha = circular_trimmed_mean_pi([p.alpha for p in fits], trim)
    return canonicalize(alpha, max(delta, 1.0), zeta, nu)
