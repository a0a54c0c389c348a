"""Structured basis function network ensembles.

Diversity-weighted base learners produce a structured dataset of their
outputs; a radial-basis combiner consistent with the loss geometry
aggregates it. Baselines, vote diagnostics and an experiment CLI are
included.
"""
from .base_learners import MlpParams, PredictorConfig, delta_weighted_update, forward, init_mlp
from .combiner import (CombinerWeights, RbfLayer, TrainedCombiner, feature_map, gradient_step_centers,
                       kmeans_centers, kmeans_refine, predict_classification, predict_regression, ridge_solve,
                       sgd_step_classification, sgd_step_regression, update_moments)
from .diagnostics import (c_bound, disagreement_report, expected_disagreement, gibbs_risk,
                          majority_vote_error, squared_loss_decomposition, summarize)
from .diversity import DiversityConfig, wta_weights
from .errors import ConfigurationError, DataFormatError, NumericError, SbfnError, ShapeError, SolverError
from .structured import EUCLIDEAN, GeometryKind, StructuredMatrix, build_row_euclidean, build_row_simplex, simplex

__version__ = "0.1.0"
