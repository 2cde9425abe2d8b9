"""Monte Carlo predictive distributions and the uncertainty decomposition.

Prediction draws joint samples of every latent quantity from the fitted
variational state, evaluates the ensemble function at the query points, and
(by default) adds observation noise, so intervals describe the outcome y
rather than the latent f.  Uncertainty splits into

* selection: spread of sum_k base_k(x) w_k(x) when only the weight-side
  latents (weight GPs, temperatures, their lengthscale) are resampled;
* prediction: spread contributed by the residual process and observation
  noise at the posterior-mean weights.

Both pieces are per-point standard deviations; their squares add up to the
total variance up to Monte Carlo error because the variational factors are
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import RESIDUAL, VariationalState, draw_latents
from .model import Dataset

__all__ = [
    "PredictiveDistribution",
    "predict",
    "decompose_uncertainty",
    "posterior_mean_weights",
]

DEFAULT_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass(frozen=True)
class PredictiveDistribution:
    """Sample-based predictive law at a set of query points."""

    query_points: np.ndarray           # (m, d)
    samples: np.ndarray                # (S, m)
    mean: np.ndarray                   # (m,)
    total_sd: np.ndarray               # (m,)
    selection_sd: np.ndarray           # (m,)
    prediction_sd: np.ndarray          # (m,)
    quantiles: dict[float, np.ndarray]

    def quantile(self, level: float) -> np.ndarray:
        """Empirical quantile at any level, recomputed from the samples."""
        return np.quantile(self.samples, level, axis=0)


def _resolve_query(dataset: Dataset, query_points, query_base_predictions):
    if query_points is None:
        return dataset.features, dataset.base_predictions
    if isinstance(query_points, Dataset):
        return query_points.features, query_points.base_predictions
    X = np.asarray(query_points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if query_base_predictions is None:
        raise ValueError("query_base_predictions required for external query points")
    P = np.asarray(query_base_predictions, dtype=float)
    if P.shape[0] != X.shape[0]:
        raise ValueError("query rows mismatch between points and base predictions")
    return X, P


def predict(dataset: Dataset, variational: VariationalState, query_points=None,
            query_base_predictions=None, n_samples: int = 2000, seed=0,
            include_noise: bool = True,
            quantile_levels=DEFAULT_QUANTILES) -> PredictiveDistribution:
    """Sample the predictive distribution at the query points.

    Deterministic given ``seed``.  ``include_noise=False`` gives intervals
    for the latent ensemble function f instead of the outcome y.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    X, P = _resolve_query(dataset, query_points, query_base_predictions)
    ss = np.random.SeedSequence(seed)
    rng_joint, rng_sel, rng_pred = (np.random.default_rng(c) for c in ss.spawn(3))

    draws = draw_latents(variational, X, P, n_samples, rng_joint)
    samples = draws.f
    if include_noise:
        samples = samples + draws.noise_sd[:, None] * rng_joint.standard_normal(samples.shape)

    sel_sd, pred_sd = _decompose(variational, X, P, n_samples, rng_sel, rng_pred,
                                 include_noise)
    levels = tuple(sorted(quantile_levels))
    qvals = np.quantile(samples, levels, axis=0)
    return PredictiveDistribution(
        query_points=X,
        samples=samples,
        mean=samples.mean(axis=0),
        total_sd=samples.std(axis=0),
        selection_sd=sel_sd,
        prediction_sd=pred_sd,
        quantiles={lv: qvals[i] for i, lv in enumerate(levels)},
    )


def _decompose(variational, X, P, n_samples, rng_sel, rng_pred, include_noise):
    sel = draw_latents(variational, X, None, n_samples, rng_sel,
                       include_residual=False)
    sel_vals = np.einsum("snk,nk->sn", sel.weights, P)
    sel_sd = sel_vals.std(axis=0)

    pred = draw_latents(variational, X, None, n_samples, rng_pred,
                        include_weights=False)
    pred_vals = pred.g[RESIDUAL]
    if include_noise:
        pred_vals = pred_vals + pred.noise_sd[:, None] * rng_pred.standard_normal(pred_vals.shape)
    return sel_sd, pred_vals.std(axis=0)


def decompose_uncertainty(dataset: Dataset, variational: VariationalState,
                          query_points=None, query_base_predictions=None,
                          n_samples: int = 2000, seed=0,
                          include_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(selection_sd, prediction_sd) at the query points; both >= 0."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    X, P = _resolve_query(dataset, query_points, query_base_predictions)
    ss = np.random.SeedSequence(seed)
    _, rng_sel, rng_pred = (np.random.default_rng(c) for c in ss.spawn(3))
    return _decompose(variational, X, P, n_samples, rng_sel, rng_pred, include_noise)


def posterior_mean_weights(variational: VariationalState, query_points,
                           n_samples: int = 2000, seed=0) -> np.ndarray:
    """Posterior-mean ensemble weights at the query points, shape (m, K)."""
    X = np.asarray(query_points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    rng = np.random.default_rng(seed)
    draws = draw_latents(variational, X, None, n_samples, rng,
                         include_residual=False)
    return draws.weights.mean(axis=0)
