"""Generative ensemble model: likelihood, priors, and the joint log density.

The observed target is Gaussian around the ensemble function

    f(x_i) = sum_k base_k(x_i) * w_k(x_i) + eps(x_i)

where the weights come from the tail-free measure over the model tree and
``eps`` is a shared residual GP correcting systematic bias of all base
models.  Scalar latents (temperatures, noise sd, kernel lengthscales) carry
lognormal priors; setting a prior to ``None`` freezes the corresponding
quantity at its configured value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NonFiniteDensity
from .kernels import KernelConfig, chol_with_jitter, gram_matrix
from .tree import ModelTree, NodeGPValues, TemperatureSet, weight_matrix

__all__ = [
    "LogNormalParams",
    "Dataset",
    "LatentState",
    "PriorConfig",
    "ensemble_values",
    "ensemble_mean",
    "joint_log_density",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LogNormalParams:
    """Location and scale of a lognormal law on a positive scalar."""

    loc: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.isfinite(self.loc):
            raise ValueError("loc must be finite")

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lx = np.log(x)
        return (-lx - np.log(self.scale) - 0.5 * LOG_2PI
                - 0.5 * ((lx - self.loc) / self.scale) ** 2)

    @property
    def median(self) -> float:
        return float(np.exp(self.loc))


@dataclass(frozen=True)
class Dataset:
    """Observations plus precomputed base-model predictions.

    ``targets`` may be ``None`` for query-only data (prediction inputs).
    ``base_names`` labels the prediction columns; it defaults to m0..m{K-1}
    and must match the model tree's leaves when fitting.
    """

    features: np.ndarray          # (n, d)
    targets: np.ndarray | None    # (n,)
    base_predictions: np.ndarray  # (n, K)
    base_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        P = np.asarray(self.base_predictions, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        y = None if self.targets is None else np.asarray(self.targets, dtype=float).reshape(-1)
        if X.ndim != 2 or P.ndim != 2:
            raise ValueError("features and base_predictions must be 2-d")
        if P.shape[0] != X.shape[0]:
            raise ValueError("row count mismatch between features and base_predictions")
        if y is not None and y.shape[0] != X.shape[0]:
            raise ValueError("row count mismatch between features and targets")
        for name, arr in (("features", X), ("targets", y), ("base_predictions", P)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite entries")
        names = tuple(self.base_names) if self.base_names else tuple(
            f"m{k}" for k in range(P.shape[1]))
        if len(names) != P.shape[1]:
            raise ValueError("base_names length must match base_predictions columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "base_predictions", P)
        object.__setattr__(self, "base_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_models(self) -> int:
        return self.base_predictions.shape[1]


@dataclass(frozen=True)
class PriorConfig:
    """Priors and kernel settings of the full model.

    The kernel configs give amplitudes, jitter, and the lengthscale used
    when ``lengthscale_prior`` is ``None`` (fixed-lengthscale mode);
    otherwise the configured lengthscale is only the reporting reference and
    the lengthscales are latent with the stated lognormal prior.
    """

    weight_kernel: KernelConfig = field(default_factory=lambda: KernelConfig(0.3))
    residual_kernel: KernelConfig = field(default_factory=lambda: KernelConfig(0.3))
    lengthscale_prior: LogNormalParams | None = field(
        default_factory=lambda: LogNormalParams(-1.0, 1.0))
    temp_prior: LogNormalParams | None = field(
        default_factory=lambda: LogNormalParams(0.0, 1.0))
    noise_prior: LogNormalParams | None = field(
        default_factory=lambda: LogNormalParams(-2.0, 1.0))
    fixed_temp: float = 1.0      # used when temp_prior is None
    fixed_noise_sd: float = 0.1  # used when noise_prior is None
    share_temperature: bool = False

    def __post_init__(self):
        if self.fixed_temp <= 0 or self.fixed_noise_sd <= 0:
            raise ValueError("fixed_temp and fixed_noise_sd must be positive")


@dataclass(frozen=True)
class LatentState:
    """One realization of every latent quantity at the data points."""

    tree: ModelTree
    node_gps: NodeGPValues
    residual: np.ndarray          # (n,)
    temps: TemperatureSet
    noise_sd: float

    def __post_init__(self):
        if not (np.isfinite(self.noise_sd) and self.noise_sd > 0):
            raise ValueError("noise_sd must be positive")
        object.__setattr__(self, "residual",
                           np.asarray(self.residual, dtype=float).reshape(-1))


def ensemble_values(dataset: Dataset, state: LatentState) -> np.ndarray:
    """Ensemble function values f(x_i) at every data row, shape (n,)."""
    if state.tree.n_leaves != dataset.n_models:
        raise ValueError("tree leaves do not match base_predictions columns")
    if dataset.n == 0:
        return np.zeros(0)
    if state.tree.gp_nodes:
        W = weight_matrix(state.tree, state.node_gps, state.temps)
    else:
        W = np.ones((dataset.n, 1))
    return (dataset.base_predictions * W).sum(axis=1) + state.residual


def ensemble_mean(dataset: Dataset, state: LatentState, point_index: int) -> float:
    """f(x_i) = sum_k base_k(x_i) w_k(x_i) + eps(x_i) at one row."""
    return float(ensemble_values(dataset, state)[point_index])


def _gauss_log_pdf(resid: np.ndarray, var: float) -> float:
    n = resid.shape[0]
    return float(-0.5 * n * (LOG_2PI + np.log(var)) - 0.5 * (resid @ resid) / var)


def _gp_log_pdf(values: np.ndarray, points: np.ndarray, cfg: KernelConfig) -> float:
    """Zero-mean multivariate normal log density under the kernel gram."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        return 0.0
    K = gram_matrix(points, cfg)
    L = chol_with_jitter(K, cfg.amplitude)
    a = solve_triangular(L, v, lower=True)
    return float(-0.5 * v.size * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * (a @ a))


def joint_log_density(dataset: Dataset, state: LatentState,
                      priors: PriorConfig) -> float:
    """log p(y | f, sigma) + log p(G) + log p(eps) + log p(Lambda) + log p(sigma).

    Lengthscales are taken from the prior kernel configs (this is the exact,
    fixed-hyperparameter joint; the inference engine handles latent
    lengthscales through its own factorization).  Raises
    :class:`NonFiniteDensity` if any term is non-finite.
    """
    total = 0.0
    if dataset.n > 0 and dataset.targets is not None:
        f = ensemble_values(dataset, state)
        with np.errstate(over="ignore"):  # overflow becomes NonFiniteDensity below
            total += _gauss_log_pdf(dataset.targets - f, state.noise_sd**2)
    for node in state.tree.gp_nodes:
        total += _gp_log_pdf(state.node_gps.value(node), dataset.features,
                             priors.weight_kernel)
    total += _gp_log_pdf(state.residual, dataset.features, priors.residual_kernel)
    if priors.temp_prior is not None:
        for node in state.tree.temp_nodes:
            total += float(priors.temp_prior.log_pdf(state.temps.value(node)))
    if priors.noise_prior is not None:
        total += float(priors.noise_prior.log_pdf(state.noise_sd))
    if not np.isfinite(total):
        raise NonFiniteDensity(f"joint log density is {total}")
    return float(total)
