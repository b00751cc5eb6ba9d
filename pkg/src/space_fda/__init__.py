"""Spatially correlated functional data analysis.

Estimation of functional principal components from sparse noisy curves
observed across spatial locations, anisotropic Matern correlation of the
component scores, spatially informed BLUP curve reconstruction, bootstrap
separability/isotropy tests, and a simulation engine.
"""

from .data_model import (EvalGrid, FunctionalDataset, Location, Observation,
                         make_grid, validate_dataset)
from .eigen_analysis import (EigenSystem, EmpiricalCorrelation, dense_fpca,
                             eigendecompose, empirical_correlations,
                             match_eigenpairs)
from .errors import SpaceFdaError
from .matern import (FitConfig, MaternParams, anisotropic_distance,
                     anisotropic_matern, canonicalize, fit_matern, fit_pooled,
                     matern_correlation, trimmed_estimate)
from .reconstruction import (ScoreEstimate, SpaceModel, blup_scores,
                             pointwise_interval, reconstruct, score_covariance,
                             score_region, simultaneous_band)
from .smoothing import (RawCovPoint, RawCovPoints, SmootherConfig, Surface,
                        estimate_sigma2, raw_cross_covariances, smooth_mean,
                        smooth_surface)
from .spatial_structure import (SeparationStructure, SeparationVector,
                                default_delta_ladder, find_pairs)

__version__ = "0.1.0"

__all__ = [
    "EvalGrid", "FunctionalDataset", "Location", "Observation", "make_grid",
    "validate_dataset", "EigenSystem", "EmpiricalCorrelation", "dense_fpca",
    "eigendecompose", "empirical_correlations", "match_eigenpairs",
    "SpaceFdaError", "FitConfig", "MaternParams", "anisotropic_distance",
    "anisotropic_matern", "canonicalize", "fit_matern", "fit_pooled",
    "matern_correlation", "trimmed_estimate", "ScoreEstimate", "SpaceModel",
    "blup_scores", "pointwise_interval", "reconstruct", "score_covariance",
    "score_region", "simultaneous_band", "RawCovPoint", "RawCovPoints",
    "SmootherConfig", "Surface", "estimate_sigma2", "raw_cross_covariances",
    "smooth_mean", "smooth_surface", "SeparationStructure", "SeparationVector",
    "default_delta_ladder", "find_pairs", "__version__",
]
