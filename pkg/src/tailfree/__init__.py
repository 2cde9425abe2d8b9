"""Adaptive Bayesian ensembling with input-dependent tail-free weights.

Combines pre-trained base models through a tree-structured, feature-dependent
weight measure driven by Gaussian processes, corrected by a shared residual
process, and fitted by calibrated variational inference (KL plus CRPS
objective).  See the README for the CLI and file formats.
"""

from .errors import (CholeskyFailure, ConfigError, DataError, DegenerateWeights,
                     NonConvergenceWarning, NonFiniteDensity,
                     RankDeficientWarning, SchemaMismatch, TreeMismatch)
from .kernels import (GPPrior, InducingSet, KernelConfig, SparseGPPosterior,
                      default_inducing_grid, exact_gp_posterior, gram_matrix,
                      optimal_sparse_posterior, rbf_kernel, sparse_gp_predict,
                      sparse_gp_sample)
from .model import Dataset, LatentState, LogNormalParams, PriorConfig, \
    ensemble_mean, joint_log_density
from .tree import (ModelTree, NodeGPValues, TemperatureSet, WeightMeasure,
                   leaf_weights, softmax_conditional, weight_entropy)
from .inference import (ObjectiveEstimate, OptimizerConfig, VariationalState,
                        crps_energy_estimate, cvm_numeric, elbo_estimate, fit,
                        score_grad_crps, score_grad_kl)
from .predictive import (PredictiveDistribution, decompose_uncertainty,
                         posterior_mean_weights, predict)

__version__ = "0.1.0"
