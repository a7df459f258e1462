"""Fixed-rank kriging under the spatial mixed effects model, with the
bisquare bandwidth constant estimated by AECM."""

from .basis import BasisSpec, bandwidth, bisquare, build_basis_matrix
from .estimation import (AecmConfig, EmConfig, EstimationError, aecm_fit, em_fit,
                         em_update, golden_candidates, initial_params,
                         quadratic_candidates)
from .geometry import KnotLayout, Metric, min_interknot_distance, pairwise_distance, place_knots
from .model import Dataset, FitResult, SMEParams, assemble_cov, restricted_loglik
from .numerics import (CovFactorization, LowRankCov, NotPositiveDefinite, factorize,
                       gls_beta, inverse_apply, logdet)
from .prediction import (KrigingOutput, PredictionRequest, cross_cov, krige,
                         kriging_se, predict, prediction_interval)

__version__ = "0.1.0"
