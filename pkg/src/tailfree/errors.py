"""Exception and warning types shared across the package."""


class CholeskyFailure(RuntimeError):
    """Cholesky factorization failed even after escalating diagonal jitter.

    Usually signals degenerate inputs: duplicated points, non-finite
    entries, or a matrix that is not positive definite.
    """


class TreeMismatch(ValueError):
    """GP values or temperatures do not cover the nodes of the model tree."""


class NonFiniteDensity(RuntimeError):
    """A log-density term evaluated to NaN or infinity (corrupted state)."""


class DegenerateWeights(RuntimeError):
    """All self-normalized importance weights underflowed (collapsed posterior)."""


class SchemaMismatch(ValueError):
    """Query data is missing columns required by a fitted model."""


class ConfigError(ValueError):
    """Invalid or missing run-configuration key; message carries the key path."""


class DataError(ValueError):
    """Malformed tabular data; message carries the first offending row/column."""


class NonConvergenceWarning(UserWarning):
    """Optimizer hit max_steps while the objective was still improving."""


class RankDeficientWarning(UserWarning):
    """Collinear base-prediction columns detected; ridge regularization applied."""
