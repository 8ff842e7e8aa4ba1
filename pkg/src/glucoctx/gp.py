"""Single-view Gaussian process regression with a zero prior mean."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import FitFailureError, IllConditionedKernelError, InputShapeError, NumericInputError
from .kernels import (
    KernelMatrix,
    KernelParams,
    cross_kernel,
    kernel_grad_hyper,
    kernel_matrix,
    median_inv_lengthscale,
)
from .optim import ScgConfig, scg_minimize

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
NOISE_FLOOR = 1e-8


def safe_cholesky(A, view=None):
    try:
        return cholesky(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        where = f" ({view} view)" if view else ""
        raise IllConditionedKernelError(f"kernel matrix is not positive definite{where}: {exc}",
                                        view=view) from exc


@dataclass(frozen=True)
class GpModel:
    """A conditioned GP: training data, kernel parameters and the Cholesky factor
    of ``K + noise_var * I``."""

    inputs: np.ndarray
    targets: np.ndarray
    params: KernelParams
    noise_var: float
    chol_cache: np.ndarray
    alpha: np.ndarray  # (K + noise I)^-1 targets

    @classmethod
    def build(cls, inputs, targets, params, noise_var):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        targets = np.asarray(targets, dtype=float)
        if targets.ndim == 1:
            targets = targets[:, None]
        if inputs.shape[0] != targets.shape[0] or inputs.shape[0] < 1 or targets.shape[1] < 1:
            raise InputShapeError(f"inputs {inputs.shape} and targets {targets.shape} are incompatible")
        if noise_var < 0:
            raise ValueError("noise_var must be non-negative")
        A = kernel_matrix(inputs, params).values
        A[np.diag_indices_from(A)] += noise_var
        L = safe_cholesky(A)
        alpha = cho_solve((L, True), targets)
        return cls(inputs, targets, params, float(noise_var), L, alpha)

    @property
    def n_outputs(self):
        return self.targets.shape[1]

    def predict(self, X_star, return_var=True):
        """Batched posterior: means (m, D) and shared variances (m,)."""
        X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
        if X_star.shape[1] != self.inputs.shape[1]:
            raise InputShapeError(
                f"query dimension {X_star.shape[1]} != training dimension {self.inputs.shape[1]}")
        Ks = cross_kernel(X_star, self.inputs, self.params)
        mean = Ks @ self.alpha
        if not return_var:
            return mean
        v = solve_triangular(self.chol_cache, Ks.T, lower=True)
        var = self.params.signal_var + self.noise_var - np.sum(v * v, axis=0)
        return mean, _clamp_var(var)


def _clamp_var(var):
    if np.any(var < 0):
        worst = float(var.min())
        if worst < -1e-12:
            log.warning("posterior variance %.3e clamped to zero", worst)
        var = np.maximum(var, 0.0)
    return var


def gp_posterior(model, x_star):
    x_star = np.asarray(x_star, dtype=float).ravel()
    if x_star.size != model.inputs.shape[1]:
        raise InputShapeError(f"x_star has {x_star.size} entries, model expects {model.inputs.shape[1]}")
    mean, var = model.predict(x_star[None, :])
    return mean[0], float(var[0])


def gp_log_likelihood(K, Y):
    """Multi-output Gaussian log-likelihood of Y (n, D) under covariance K."""
    K = K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, D = Y.shape
    if K.shape != (n, n):
        raise InputShapeError(f"K is {K.shape} but Y has {n} rows")
    L = safe_cholesky(K)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Z = solve_triangular(L, Y, lower=True)
    return -0.5 * n * D * LOG_2PI - 0.5 * D * logdet - 0.5 * float(np.sum(Z * Z))


def _unpack(theta, jitter):
    params = KernelParams(theta[0], theta[1], jitter)
    return params, NOISE_FLOOR + np.exp(theta[2])


def _neg_loglik_and_grad(theta, X, Y, jitter):
    params, noise = _unpack(theta, jitter)
    n, D = Y.shape
    A = kernel_matrix(X, params).values
    A[np.diag_indices_from(A)] += noise
    L = safe_cholesky(A)
    alpha = cho_solve((L, True), Y)
    nll = (0.5 * n * D * LOG_2PI + D * np.sum(np.log(np.diag(L)))
           + 0.5 * float(np.sum(Y * alpha)))
    Ainv = cho_solve((L, True), np.eye(n))
    bracket = 0.5 * (D * Ainv - alpha @ alpha.T)
    dK_ds, dK_dl = kernel_grad_hyper(X, params)
    grad = np.array([
        np.sum(bracket * dK_ds),
        np.sum(bracket * dK_dl),
        np.trace(bracket) * (noise - NOISE_FLOOR),
    ])
    return nll, grad


def gp_fit_hyper(inputs, targets, init=None, noise_init=0.1, restarts=3, seed=0, scg=None):
    """Fit (signal variance, inverse lengthscale, noise variance) by maximum likelihood.

    The first run starts at ``init``; the remaining ``restarts - 1`` start from
    seeded log-normal perturbations of it. The best run is kept, so the result
    is never worse than the initial point.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 2 or X.shape[0] != Y.shape[0]:
        raise InputShapeError(f"need n >= 2 matching rows, got inputs {X.shape}, targets {Y.shape}")
    if init is None:
        init = KernelParams.from_values(max(float(np.var(Y)), 1e-3), median_inv_lengthscale(X))
    scg = scg or ScgConfig(max_iters=100, rel_tol=1e-6)
    jitter = init.jitter
    rng = np.random.default_rng(seed)

    cache = {}

    def evaluate(theta):
        key = theta.tobytes()
        if key not in cache:
            cache.clear()
            try:
                cache[key] = _neg_loglik_and_grad(theta, X, Y, jitter)
            except (IllConditionedKernelError, NumericInputError):
                cache[key] = (np.inf, np.full(3, np.nan))
        return cache[key]

    theta0 = np.array([init.log_signal_var, init.log_inv_lengthscale,
                       np.log(max(noise_init - NOISE_FLOOR, NOISE_FLOOR))])
    best_theta, best_f = None, np.inf
    for r in range(max(1, restarts)):
        start = theta0 if r == 0 else theta0 + rng.normal(scale=1.0, size=3)
        if not np.isfinite(evaluate(start)[0]):
            continue
        theta, f_star, _ = scg_minimize(lambda t: evaluate(t)[0], lambda t: evaluate(t)[1], start, scg)
        if f_star < best_f:
            best_theta, best_f = theta, f_star
    if best_theta is None:
        raise FitFailureError("every hyperparameter restart hit a singular kernel")
    params, noise = _unpack(best_theta, jitter)
    return GpModel.build(X, Y, params, noise)


def squash(f):
    """Overflow-safe logistic function."""
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    e = np.exp(f[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


class GPRegressor(BaseEstimator, RegressorMixin):
    """Zero-mean GP regressor with an RBF kernel and learned noise.

    Parameters
    ----------
    noise_init : float, default=0.1
        Initial noise variance (targets are standardized internally).
    restarts : int, default=3
        Number of seeded optimizer restarts for the hyperparameters.
    random_state : int, default=0
    """

    def __init__(self, noise_init=0.1, restarts=3, random_state=0):
        self.noise_init = noise_init
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.y_mean_ = float(np.mean(y))
        self.y_std_ = float(np.std(y)) or 1.0
        self.model_ = gp_fit_hyper(X, (y - self.y_mean_) / self.y_std_, noise_init=self.noise_init,
                                   restarts=self.restarts, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X)
        mean, var = self.model_.predict(X)
        mean = mean[:, 0] * self.y_std_ + self.y_mean_
        if return_std:
            return mean, np.sqrt(var) * self.y_std_
        return mean
