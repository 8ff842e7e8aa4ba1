"""RBF kernel, kernel matrices and their derivatives.

The kernel is ``k(x, x') = signal_var * exp(-inv_lengthscale / 2 * |x - x'|^2)``
with both parameters stored as logarithms so optimizers work unconstrained.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .exceptions import InputShapeError, NumericInputError

MAX_JITTER = 1e-2
DEFAULT_RELATIVE_JITTER = 1e-6


@dataclass(frozen=True)
class KernelParams:
    log_signal_var: float = 0.0
    log_inv_lengthscale: float = 0.0
    jitter: float = DEFAULT_RELATIVE_JITTER

    def __post_init__(self):
        for name in ("log_signal_var", "log_inv_lengthscale"):
            value = float(getattr(self, name))
            with np.errstate(over="ignore"):
                natural = np.exp(value)
            if not np.isfinite(natural) or natural <= 0.0:
                raise NumericInputError(f"{name}={value} gives a non-positive or infinite parameter")
            object.__setattr__(self, name, value)
        jitter = float(self.jitter)
        if not 0.0 <= jitter <= MAX_JITTER:
            raise NumericInputError(f"jitter must lie in [0, {MAX_JITTER}], got {jitter}")
        object.__setattr__(self, "jitter", jitter)

    @classmethod
    def from_values(cls, signal_var=1.0, inv_lengthscale=1.0, jitter=None):
        """Build from natural-scale values; jitter defaults to 1e-6 * signal_var."""
        if jitter is None:
            jitter = DEFAULT_RELATIVE_JITTER * signal_var
        return cls(np.log(signal_var), np.log(inv_lengthscale), jitter)

    @property
    def signal_var(self):
        return float(np.exp(self.log_signal_var))

    @property
    def inv_lengthscale(self):
        return float(np.exp(self.log_inv_lengthscale))

    def to_array(self):
        return np.array([self.log_signal_var, self.log_inv_lengthscale])

    def with_log_values(self, log_values):
        return replace(self, log_signal_var=float(log_values[0]),
                       log_inv_lengthscale=float(log_values[1]))


@dataclass(frozen=True)
class KernelMatrix:
    values: np.ndarray
    params_used: KernelParams

    @property
    def n(self):
        return self.values.shape[0]


def _as_points(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise InputShapeError(f"expected a non-empty (n, d) matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericInputError("kernel inputs contain non-finite values")
    return X


def rbf(x_i, x_j, params):
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    x_j = np.atleast_1d(np.asarray(x_j, dtype=float))
    if x_i.ndim != 1 or x_i.shape != x_j.shape or x_i.size < 1:
        raise InputShapeError(f"rbf needs equal-length vectors, got {x_i.shape} and {x_j.shape}")
    sq = float(np.sum((x_i - x_j) ** 2))
    return params.signal_var * np.exp(-0.5 * params.inv_lengthscale * sq)


def sq_dists(X, Z=None):
    """Pairwise squared Euclidean distances; exactly symmetric with a zero diagonal when Z is None."""
    if Z is None:
        if X.shape[0] == 1:
            return np.zeros((1, 1))
        return squareform(pdist(X, "sqeuclidean"))
    return cdist(X, Z, "sqeuclidean")


def kernel_matrix_nojitter(X, params):
    X = _as_points(X)
    return params.signal_var * np.exp(-0.5 * params.inv_lengthscale * sq_dists(X))


def kernel_matrix(X, params):
    K = kernel_matrix_nojitter(X, params)
    K[np.diag_indices_from(K)] += params.jitter
    return KernelMatrix(K, params)


def cross_kernel(X, Z, params):
    """Kernel between the rows of X and the rows of Z (no jitter)."""
    X = _as_points(X)
    Z = _as_points(Z)
    if X.shape[1] != Z.shape[1]:
        raise InputShapeError(f"dimension mismatch: {X.shape[1]} vs {Z.shape[1]}")
    return params.signal_var * np.exp(-0.5 * params.inv_lengthscale * sq_dists(X, Z))


def kernel_grad_latent(X, params, i):
    """Dense (n, n, d) tensor of dK[a, b] / dX[i, m].

    Only row and column ``i`` are nonzero. Model code never calls this; it uses
    the contracted form in ``latent_grad_from_bracket`` instead.
    """
    X = _as_points(X)
    n, d = X.shape
    if not 0 <= i < n:
        raise IndexError(f"latent index {i} out of range for {n} points")
    K0 = kernel_matrix_nojitter(X, params)
    # dK[i, j] / dX[i, m] = -theta2 * (X[i, m] - X[j, m]) * K0[i, j]
    row = -params.inv_lengthscale * (X[i] - X) * K0[i][:, None]
    out = np.zeros((n, n, d))
    out[i, :, :] = row
    out[:, i, :] = row
    out[i, i, :] = 0.0
    return out


def kernel_grad_hyper(X, params):
    """Derivatives of K (without jitter) with respect to both log-parameters."""
    X = _as_points(X)
    D2 = sq_dists(X)
    K0 = params.signal_var * np.exp(-0.5 * params.inv_lengthscale * D2)
    return K0, -0.5 * params.inv_lengthscale * D2 * K0


def latent_grad_from_bracket(X, params, G, K0=None):
    """Contract a symmetric (n, n) bracket G against dK/dX.

    Returns the (n, d) matrix whose row i is ``sum_ab G[a, b] dK[a, b]/dX[i]``,
    computed in O(n^2 d) without materializing the derivative tensor.
    """
    if K0 is None:
        K0 = kernel_matrix_nojitter(X, params)
    W = G * K0
    return -2.0 * params.inv_lengthscale * (W.sum(axis=1)[:, None] * X - W @ X)


def median_inv_lengthscale(X):
    """Median heuristic: 1 / median nonzero squared distance (1.0 if undefined)."""
    X = _as_points(X)
    if X.shape[0] < 2:
        return 1.0
    d = pdist(X, "sqeuclidean")
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(1.0 / np.median(d))
