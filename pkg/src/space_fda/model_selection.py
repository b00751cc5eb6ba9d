"""Bandwidth and component-count selection.

Bandwidths come from leave-one-bin-out cross-validation of the local
linear smoothers; the component count comes from the largest drop in the
leave-curves-out reconstruction error profile, with spatial buffering
between training and testing curves to blunt correlation leakage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data_model import FunctionalDataset
from .errors import (BufferTooLargeError, DegenerateFitError,
                     InsufficientDataError, InvalidArgumentError)
from .reconstruction import SpaceModel, blup_scores, reconstruct
from .smoothing import RawCovPoints, loclin_predict_1d, loclin_predict_2d


class NoKinkWarning(UserWarning):
    """The cross-validation profile has no distinguished drop."""


@dataclass(frozen=True)
class CvReport:
    """Score for one candidate (bandwidth or component count)."""

    candidate: float
    score: float
    fold_scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "fold_scores", tuple(self.fold_scores))


def _bin_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    edges = np.linspace(lo, hi, bins + 1)
    edges[-1] = np.nextafter(edges[-1], np.inf)
    return edges


def _partition_1d(x: np.ndarray, bins: int) -> list[np.ndarray] | None:
    edges = _bin_edges(float(x.min()), float(x.max()), bins)
    which = np.digitize(x, edges) - 1
    groups = [np.nonzero(which == b)[0] for b in range(bins)]
    if any(g.size == 0 for g in groups):
        return None
    return groups


def _partition_2d(s: np.ndarray, t: np.ndarray, bins: int) -> list[np.ndarray] | None:
    es = _bin_edges(float(s.min()), float(s.max()), bins)
    et = _bin_edges(float(t.min()), float(t.max()), bins)
    cell = (np.digitize(s, es) - 1) * bins + (np.digitize(t, et) - 1)
    groups = [np.nonzero(cell == c)[0] for c in range(bins * bins)]
    groups = [g for g in groups]
    if any(g.size == 0 for g in groups):
        return None
    return groups


def lobo_bandwidth(points, candidates: Sequence[float],
                   bins: int = 10) -> list[CvReport]:
    """Leave-one-bin-out bandwidth selection for the local linear smoothers.

    ``points`` is either a pair of 1D arrays (times, values) for the mean
    smoother or :class:`RawCovPoints` for the surface smoother. Points are
    grouped into equal-width bins over their domain (per axis in 2D); each
    bin is predicted from the others and scored by mean squared prediction
    error. Empty bins trigger a retry with one fewer bin, down to 2.
    Candidates whose local designs degenerate on some fold score infinity.
    """
    if len(candidates) == 0:
        raise InvalidArgumentError("no bandwidth candidates")
    if bins < 2:
        raise InvalidArgumentError("bins must be at least 2")
    if isinstance(points, RawCovPoints):
        s, t, y = points.s, points.t, points.d
        two_d = True
    else:
        s, y = (np.asarray(points[0], dtype=float),
                np.asarray(points[1], dtype=float))
        t = None
        two_d = False

    groups = None
    n_bins = bins
    while n_bins >= 2:
        groups = (_partition_2d(s, t, n_bins) if two_d
                  else _partition_1d(s, n_bins))
        if groups is not None:
            break
        n_bins -= 1
    if groups is None:
        raise InsufficientDataError(
            "could not form two nonempty bins for cross-validation")

    reports = []
    for h in sorted(float(c) for c in candidates):
        fold_scores = []
        for held in groups:
            train = np.setdiff1d(np.arange(s.size), held, assume_unique=False)
            try:
                if two_d:
                    pred = loclin_predict_2d(s[train], t[train], y[train], h,
                                             s[held], t[held])
                else:
                    pred = loclin_predict_1d(s[train], y[train], h, s[held])
                fold_scores.append(float(np.mean((pred - y[held]) ** 2)))
            except (DegenerateFitError, InsufficientDataError):
                fold_scores.append(np.inf)
        reports.append(CvReport(candidate=h,
                                score=float(np.mean(fold_scores)),
                                fold_scores=tuple(fold_scores)))
    return reports


def best_bandwidth(reports: Sequence[CvReport]) -> float:
    """Candidate with the lowest score; ties go to the smaller bandwidth."""
    best = min(reports, key=lambda r: (r.score, r.candidate))
    if not np.isfinite(best.score):
        raise InsufficientDataError("every bandwidth candidate degenerated")
    return best.candidate


def errcv_curves(data: FunctionalDataset, k_candidates: Sequence[int],
                 j_folds: int, buffer: float,
                 fit: Callable[[FunctionalDataset, int], SpaceModel],
                 truth: np.ndarray | None = None,
                 truth_grid=None) -> list[CvReport]:
    """Leave-curves-out reconstruction error profile over component counts.

    Locations are split into ``j_folds`` spatially contiguous blocks
    (equal slices of the coordinate-sorted order), so a positive ``buffer``
    carves a collar around each test block instead of hollowing out the
    whole domain. For each fold the training set drops every curve within
    Euclidean distance ``buffer`` of a test curve, ``fit`` builds a model
    on the training curves, and the test curves are reconstructed from
    their own observations under that model. Scores are mean squared
    reconstruction errors: against ``truth`` rows (dataset order) when
    given, otherwise against the held-out observations at their times.
    """
    if j_folds < 2:
        raise InvalidArgumentError("need at least 2 folds")
    if len(k_candidates) == 0:
        raise InvalidArgumentError("no component-count candidates")
    coords = {loc.id: (loc.x, loc.y) for loc in data.locations}
    ids = sorted(data.location_ids, key=lambda i: (coords[i], i))
    if len(ids) < 2 * j_folds:
        raise InvalidArgumentError(
            f"{len(ids)} curves cannot support {j_folds} folds")
    edges = np.linspace(0, len(ids), j_folds + 1).astype(int)
    folds = [ids[edges[j]:edges[j + 1]] for j in range(j_folds)]
    id_to_row = {loc.id: i for i, loc in enumerate(data.locations)}

    split = []
    for test_ids in folds:
        test_xy = np.array([coords[i] for i in test_ids])
        train_ids = []
        for i in ids:
            if i in set(test_ids):
                continue
            d = np.min(np.hypot(test_xy[:, 0] - coords[i][0],
                                test_xy[:, 1] - coords[i][1]))
            if d > buffer:
                train_ids.append(i)
        if not train_ids:
            raise BufferTooLargeError(
                f"buffer {buffer} removed every training curve for a fold")
        split.append((test_ids, train_ids))

    reports = []
    for k in sorted(int(k) for k in k_candidates):
        fold_scores = []
        for test_ids, train_ids in split:
            model = fit(data.subset(train_ids), k)
            test_data = data.subset(test_ids)
            est = blup_scores(model, test_data, error_cov=False)
            grid = (truth_grid if truth is not None and truth_grid is not None
                    else model.eigen.grid)
            recon = reconstruct(model, est, grid=grid)
            if truth is not None:
                rows = np.array([id_to_row[i] for i in test_ids])
                if recon.shape[1] != truth.shape[1]:
                    raise InvalidArgumentError(
                        "truth grid does not match the model grid; pass "
                        "truth_grid")
                fold_scores.append(float(np.mean((recon - truth[rows]) ** 2)))
            else:
                sq = 0.0
                count = 0
                for r, i in enumerate(test_ids):
                    times, values = test_data.curve(r)
                    fit_vals = np.interp(times, grid.points, recon[r])
                    sq += float(np.sum((fit_vals - values) ** 2))
                    count += times.size
                fold_scores.append(sq / count)
        reports.append(CvReport(candidate=float(k),
                                score=float(np.mean(fold_scores)),
                                fold_scores=tuple(fold_scores)))
    return reports


def select_k(reports: Sequence[CvReport]) -> int:
    """Component count right after the largest consecutive score drop.

    Ties break toward the smaller count; a profile with no positive drop
    emits :class:`NoKinkWarning` and still returns the tie-rule choice.
    """
    if len(reports) < 2:
        raise InvalidArgumentError("need at least two candidates to find a kink")
    ks = [int(r.candidate) for r in reports]
    if ks != sorted(ks):
        raise InvalidArgumentError("reports must be sorted by ascending K")
    scores = np.array([r.score for r in reports])
    drops = scores[:-1] - scores[1:]
    best = int(np.argmax(drops))
    if drops[best] <= 0.0:
        warnings.warn("no kink: cross-validation profile never drops",
                      NoKinkWarning)
    return ks[best + 1]
