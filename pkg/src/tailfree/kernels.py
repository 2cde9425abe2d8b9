"""RBF kernels, Gaussian-process priors, and inducing-point (sparse GP) machinery.

All Gaussian processes in the package share the squared-exponential kernel

    k(x, x') = amplitude * exp(-||x - x'||^2 / (2 * lengthscale^2))

and a constant (default zero) mean.  The sparse posterior is the classic
inducing-point approximation: a free Gaussian over the process values at M
inducing locations, with the usual conditional law everywhere else.

Conventions
-----------
* Points are row vectors; a set of n points in d dimensions is an (n, d)
  array.  1-d inputs may be passed as (n,) arrays or scalars.
* ``SparseGPPosterior`` stores the Gaussian over the *un-whitened* inducing
  values u = f(Z).  The inference module optimizes a whitened
  reparameterization (v = L_z^{-1} u); see ``whitened_params``.
* Every sampling routine takes an explicit seed (or ``numpy`` Generator)
  and is bit-reproducible given it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import CholeskyFailure

__all__ = [
    "KernelConfig",
    "GPPrior",
    "InducingSet",
    "SparseGPPosterior",
    "rbf_kernel",
    "pairwise_sq_dists",
    "rbf_matrix",
    "gram_matrix",
    "chol_with_jitter",
    "default_inducing_grid",
    "sparse_gp_predict",
    "sparse_gp_sample",
    "exact_gp_posterior",
    "optimal_sparse_posterior",
]

#: escalation schedule for numerically rescuing a failed Cholesky:
#: extra diagonal jitter starts at JITTER_START * amplitude and grows by
#: JITTER_GROWTH until JITTER_MAX * amplitude, after which we give up.
JITTER_START = 1e-6
JITTER_GROWTH = 10.0
JITTER_MAX = 1e-2


@dataclass(frozen=True)
class KernelConfig:
    """Hyperparameters of one RBF kernel.

    Parameters
    ----------
    lengthscale : float
        Correlation length in input units; must be positive.
    amplitude : float
        Marginal variance k(x, x); must be positive.
    jitter : float
        Diagonal stabilizer added by :func:`gram_matrix`; non-negative.
    """

    lengthscale: float
    amplitude: float = 1.0
    jitter: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (np.isfinite(self.amplitude) and self.amplitude > 0):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not (np.isfinite(self.jitter) and self.jitter >= 0):
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")

    def with_lengthscale(self, lengthscale: float) -> "KernelConfig":
        return KernelConfig(lengthscale=float(lengthscale), amplitude=self.amplitude,
                            jitter=self.jitter)


@dataclass(frozen=True)
class GPPrior:
    """A GP prior: kernel plus constant mean (zero unless stated otherwise)."""

    kernel: KernelConfig
    mean: float = 0.0


def _as_points(x) -> np.ndarray:
    """Coerce scalars / (n,) arrays / (n, d) arrays to an (n, d) float array."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a[:, None]
    if a.ndim != 2:
        raise ValueError(f"points must be at most 2-d, got shape {a.shape}")
    return a


def pairwise_sq_dists(a, b) -> np.ndarray:
    """Squared Euclidean distances between two point sets, shape (n, m)."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def rbf_kernel(x, x2, cfg: KernelConfig) -> float:
    """Evaluate the RBF kernel between two single points.

    Returns ``amplitude * exp(-||x - x2||^2 / (2 lengthscale^2))``; symmetric,
    equal to ``amplitude`` at x == x2.  A 1-d array is one point in d
    dimensions here (use :func:`rbf_matrix` for point sets).
    """
    a = np.asarray(x, dtype=float).reshape(1, -1)
    b = np.asarray(x2, dtype=float).reshape(1, -1)
    d2 = pairwise_sq_dists(a, b)
    return float(cfg.amplitude * np.exp(-d2[0, 0] / (2.0 * cfg.lengthscale**2)))


def rbf_matrix(a, b, cfg: KernelConfig) -> np.ndarray:
    """Cross-covariance matrix k(a_i, b_j), shape (n, m), no jitter."""
    d2 = pairwise_sq_dists(a, b)
    return cfg.amplitude * np.exp(-d2 / (2.0 * cfg.lengthscale**2))


def gram_matrix(points, cfg: KernelConfig) -> np.ndarray:
    """Kernel Gram matrix with ``cfg.jitter`` added on the diagonal.

    The result is symmetric positive definite for distinct points (and
    positive semidefinite plus jitter otherwise).
    """
    pts = _as_points(points)
    if pts.shape[0] < 1:
        raise ValueError("gram_matrix needs at least one point")
    K = rbf_matrix(pts, pts, cfg)
    if cfg.jitter:
        K = K + cfg.jitter * np.eye(pts.shape[0])
    return K


def chol_with_jitter(mat: np.ndarray, amplitude: float) -> np.ndarray:
    """Lower Cholesky factor of ``mat``, escalating diagonal jitter on failure.

    Jitter starts at ``JITTER_START * amplitude`` and multiplies by
    ``JITTER_GROWTH`` until ``JITTER_MAX * amplitude``.  Supports stacked
    matrices (..., n, n); the escalation is applied to the whole stack.

    Raises
    ------
    CholeskyFailure
        If factorization keeps failing at the jitter cap.
    """
    if not np.all(np.isfinite(mat)):
        raise CholeskyFailure("matrix contains non-finite entries")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    n = mat.shape[-1]
    eye = np.eye(n)
    extra = JITTER_START * amplitude
    cap = JITTER_MAX * amplitude * (1.0 + 1e-12)
    while extra <= cap:
        try:
            return np.linalg.cholesky(mat + extra * eye)
        except np.linalg.LinAlgError:
            extra *= JITTER_GROWTH
    raise CholeskyFailure(
        f"Cholesky failed with jitter up to {JITTER_MAX * amplitude:.3g} "
        f"(degenerate or duplicated inputs?)"
    )


@dataclass(frozen=True)
class InducingSet:
    """A fixed set of inducing locations in feature space."""

    locations: np.ndarray  # (M, d)

    def __post_init__(self):
        object.__setattr__(self, "locations", _as_points(self.locations))
        if self.count < 1:
            raise ValueError("need at least one inducing point")
        if self.count > 1:
            d2 = pairwise_sq_dists(self.locations, self.locations)
            off = d2[~np.eye(self.count, dtype=bool)]
            if off.min() <= 0.0:
                raise ValueError("inducing locations must be pairwise distinct")

    @property
    def count(self) -> int:
        return self.locations.shape[0]


def default_inducing_grid(train_x, count: int | None = None) -> InducingSet:
    """Uniform grid over the bounding box of the training inputs.

    ``count`` defaults to ``min(n_train, 20)``.  In more than one dimension
    the grid uses ``floor(count ** (1/d))`` points per axis (at least 2), so
    the realized count may be slightly below the request.
    """
    x = _as_points(train_x)
    n, d = x.shape
    if count is None:
        count = min(n, 20)
    count = max(int(count), 1)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    # guard collapsed axes so grid points stay distinct
    width = np.where(span > 0, span, np.maximum(np.abs(lo), 1.0))
    lo = np.where(span > 0, lo, lo - 0.5 * width)
    hi = np.where(span > 0, hi, hi + 0.5 * width)
    if count == 1:
        locs = (0.5 * (lo + hi))[None, :]
    elif d == 1:
        locs = np.linspace(lo[0], hi[0], count)[:, None]
    else:
        per_dim = max(2, int(np.floor(count ** (1.0 / d)))) if count > 1 else 1
        axes = [np.linspace(lo[j], hi[j], per_dim) for j in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        locs = np.column_stack([m.ravel() for m in mesh])
    return InducingSet(locations=locs)


@dataclass(frozen=True)
class SparseGPPosterior:
    """Gaussian over the GP values u = f(Z) at the inducing locations Z.

    ``variational_cov_chol`` is the lower Cholesky factor of the covariance;
    its diagonal must be strictly positive.
    """

    inducing: InducingSet
    variational_mean: np.ndarray       # (M,)
    variational_cov_chol: np.ndarray   # (M, M) lower triangular
    kernel: KernelConfig

    def __post_init__(self):
        m = np.asarray(self.variational_mean, dtype=float).reshape(-1)
        L = np.asarray(self.variational_cov_chol, dtype=float)
        M = self.inducing.count
        if m.shape != (M,):
            raise ValueError(f"variational_mean must have length {M}")
        if L.shape != (M, M):
            raise ValueError(f"variational_cov_chol must be {M}x{M}")
        if np.any(np.diag(L) <= 0):
            raise ValueError("variational_cov_chol needs a strictly positive diagonal")
        object.__setattr__(self, "variational_mean", m)
        object.__setattr__(self, "variational_cov_chol", np.tril(L))


def _prior_chol(post: SparseGPPosterior) -> np.ndarray:
    Kzz = gram_matrix(post.inducing.locations, post.kernel)
    return chol_with_jitter(Kzz, post.kernel.amplitude)


def whitened_params(post: SparseGPPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Whitened view (m_v, L_v) with u = L_z v, v ~ N(m_v, L_v L_v^T)."""
    Lz = _prior_chol(post)
    m_v = solve_triangular(Lz, post.variational_mean, lower=True)
    L_v = solve_triangular(Lz, post.variational_cov_chol, lower=True)
    return m_v, L_v


def from_whitened(inducing: InducingSet, kernel: KernelConfig,
                  m_v: np.ndarray, L_v: np.ndarray) -> SparseGPPosterior:
    """Inverse of :func:`whitened_params`."""
    Kzz = gram_matrix(inducing.locations, kernel)
    Lz = chol_with_jitter(Kzz, kernel.amplitude)
    return SparseGPPosterior(
        inducing=inducing,
        variational_mean=Lz @ np.asarray(m_v, dtype=float),
        variational_cov_chol=np.tril(Lz @ np.asarray(L_v, dtype=float)),
        kernel=kernel,
    )


def sparse_gp_predict(post: SparseGPPosterior, query) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and covariance of the sparse posterior at query points.

    mean = K_xz Kzz^{-1} m
    cov  = K_xx - K_xz Kzz^{-1} K_zx + K_xz Kzz^{-1} S Kzz^{-1} K_zx
    """
    q = _as_points(query)
    Lz = _prior_chol(post)
    Kzq = rbf_matrix(post.inducing.locations, q, post.kernel)
    B = solve_triangular(Lz, Kzq, lower=True)                  # (M, m)
    c = solve_triangular(Lz, post.variational_mean, lower=True)
    mean = B.T @ c
    Kqq = rbf_matrix(q, q, post.kernel)
    # W = Kzz^{-1} K_zq expressed through the prior Cholesky
    W = solve_triangular(Lz.T, B, lower=False)                 # (M, m)
    SW = post.variational_cov_chol.T @ W                       # (M, m)
    cov = Kqq - B.T @ B + SW.T @ SW
    return mean, cov


def sparse_gp_sample(post: SparseGPPosterior, query, noise_free: bool = False,
                     seed=None) -> np.ndarray:
    """One joint draw of the GP at query points under the sparse posterior.

    With ``noise_free=True`` the conditional fluctuation beyond the inducing
    representation is suppressed and only the smooth component
    ``K_xz Kzz^{-1} u`` is returned.  Deterministic given ``seed``.
    """
    q = _as_points(query)
    if q.shape[0] < 1:
        raise ValueError("query must be non-empty")
    rng = np.random.default_rng(seed)
    Lz = _prior_chol(post)
    Kzq = rbf_matrix(post.inducing.locations, q, post.kernel)
    B = solve_triangular(Lz, Kzq, lower=True)                  # (M, m)
    M = post.inducing.count
    u = post.variational_mean + post.variational_cov_chol @ rng.standard_normal(M)
    smooth = B.T @ solve_triangular(Lz, u, lower=True)
    if noise_free:
        return smooth
    Kqq = rbf_matrix(q, q, post.kernel)
    cond = Kqq - B.T @ B
    cond[np.diag_indices_from(cond)] = np.maximum(np.diag(cond), 0.0)
    Lc = chol_with_jitter(cond + 1e-12 * post.kernel.amplitude * np.eye(q.shape[0]),
                          post.kernel.amplitude)
    return smooth + Lc @ rng.standard_normal(q.shape[0])


def exact_gp_posterior(train_x, train_y, noise_var: float, cfg: KernelConfig,
                       query) -> tuple[np.ndarray, np.ndarray]:
    """Dense GP regression posterior (mean, covariance) at query points.

    Zero training points returns the prior.  Serves as the exactness oracle
    for the sparse approximation.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    q = _as_points(query)
    y = np.asarray(train_y, dtype=float).reshape(-1)
    Kqq = rbf_matrix(q, q, cfg)
    if y.size == 0:
        return np.zeros(q.shape[0]), Kqq
    x = _as_points(train_x)
    K = rbf_matrix(x, x, cfg) + noise_var * np.eye(x.shape[0])
    L = chol_with_jitter(K, cfg.amplitude)
    Kxq = rbf_matrix(x, q, cfg)
    A = solve_triangular(L, Kxq, lower=True)
    mean = A.T @ solve_triangular(L, y, lower=True)
    cov = Kqq - A.T @ A
    return mean, cov


def optimal_sparse_posterior(train_x, train_y, noise_var: float, cfg: KernelConfig,
                             inducing: InducingSet) -> SparseGPPosterior:
    """Closed-form optimum of the inducing-point variational family.

    S = Kzz (Kzz + K_zx K_xz / noise)^{-1} Kzz
    m = Kzz (Kzz + K_zx K_xz / noise)^{-1} K_zx y / noise

    With inducing locations equal to the training inputs this reproduces the
    exact GP posterior.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    x = _as_points(train_x)
    y = np.asarray(train_y, dtype=float).reshape(-1)
    Z = inducing.locations
    Kzz = gram_matrix(Z, cfg)
    Kzx = rbf_matrix(Z, x, cfg)
    M1 = Kzz + (Kzx @ Kzx.T) / noise_var
    L1 = chol_with_jitter(M1, cfg.amplitude)
    half = solve_triangular(L1, Kzz, lower=True)              # L1^{-1} Kzz
    S = half.T @ half
    rhs = solve_triangular(L1, Kzx @ y / noise_var, lower=True)
    m = half.T @ rhs
    Ls = chol_with_jitter(S, cfg.amplitude)
    return SparseGPPosterior(inducing=inducing, variational_mean=m,
                             variational_cov_chol=Ls, kernel=cfg)
