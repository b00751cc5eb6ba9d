"""Shared dense linear-algebra helpers (jittered factorizations)."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConditioningError

# Jitter escalates from 1e-10 to 1e-6 of the mean diagonal; fitted
# correlation matrices are PD in exact arithmetic, so anything a larger
# jitter would "fix" is a real modeling problem and should surface.
JITTER_START = 1e-10
JITTER_MAX = 1e-6


def jittered_cho_factor(a: np.ndarray, label: str = "matrix"):
    """Cholesky-factor a symmetric matrix, escalating diagonal jitter.

    Returns ``(factor, jitter_used)`` where ``factor`` feeds
    :func:`scipy.linalg.cho_solve`. Raises :class:`ConditioningError` once
    the jitter budget is exhausted.
    """
    scale = float(np.mean(np.diag(a)))
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            mat = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
            return cho_factor(mat, lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX * scale:
            raise ConditioningError(
                f"{label} is not positive definite within the jitter budget "
                f"(scale {scale:.3e})")


def jittered_solve(a: np.ndarray, b: np.ndarray, label: str = "matrix") -> np.ndarray:
    factor, _ = jittered_cho_factor(a, label)
    return cho_solve(factor, b)


def jittered_inv(a: np.ndarray, label: str = "matrix") -> np.ndarray:
    return jittered_solve(a, np.eye(a.shape[0]), label)


def assert_positive_definite(a: np.ndarray, label: str = "matrix") -> None:
    jittered_cho_factor(a, label)
