"""Comparison models: multinomial logistic regression, kernel CCA and early fusion."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import DegenerateLabelsError, IllConditionedKernelError, InputShapeError, NumericInputError
from .kernels import KernelParams, cross_kernel, median_inv_lengthscale
from .optim import ScgConfig, scg_minimize

log = logging.getLogger(__name__)

N_CLASSES = 3
LINEAR = "linear"
# eigenvalues below this fraction of the largest are treated as numerical zero
EIG_RTOL = 1e-10


def early_fusion(V_row, S_row=None):
    """Concatenate glucose and context features along the last axis."""
    V_row = np.asarray(V_row, dtype=float)
    if S_row is None:
        return V_row.copy()
    S_row = np.asarray(S_row, dtype=float)
    if V_row.ndim == 2 and S_row.ndim == 1 and S_row.size == 0:
        S_row = S_row.reshape(V_row.shape[0], 0)
    return np.concatenate([V_row, S_row], axis=-1)


# --------------------------------------------------------------------------
# Logistic regression


@dataclass(frozen=True)
class LogisticModel:
    """Softmax regression; ``weights`` row 0 holds the biases."""

    weights: np.ndarray
    l2: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise NumericInputError("logistic weights must be finite")

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weights.shape[0] - 1:
            raise InputShapeError(f"expected {self.weights.shape[0] - 1} features, got {X.shape[1]}")
        return self.weights[0] + X @ self.weights[1:]

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


def _logistic_loss(W, Xa, onehot, l2):
    Z = Xa @ W
    logp = log_softmax(Z, axis=1)
    n = Xa.shape[0]
    loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(W[1:] ** 2)
    grad = Xa.T @ (np.exp(logp) - onehot) / n
    grad[1:] += l2 * W[1:]
    return loss, grad


def logistic_train(features, labels, l2=1e-4, scg=None):
    """Fit multinomial logistic regression over the three glycemic classes by SCG."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=int).ravel()
    if X.shape[0] != y.size:
        raise InputShapeError(f"{X.shape[0]} feature rows but {y.size} labels")
    if y.size < 3:
        raise InputShapeError("logistic regression needs at least 3 samples")
    if np.any((y < 0) | (y >= N_CLASSES)):
        raise ValueError("labels must be glycemic label codes 0, 1 or 2")
    if np.unique(y).size < 2:
        raise DegenerateLabelsError(f"only one class present ({int(y[0])}); nothing to discriminate")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")

    Xa = np.hstack([np.ones((X.shape[0], 1)), X])
    onehot = np.eye(N_CLASSES)[y]
    shape = (Xa.shape[1], N_CLASSES)
    cache = {}

    def evaluate(w):
        key = w.tobytes()
        if key not in cache:
            cache.clear()
            loss, grad = _logistic_loss(w.reshape(shape), Xa, onehot, l2)
            cache[key] = (loss, grad.ravel())
        return cache[key]

    w, _, _ = scg_minimize(lambda w: evaluate(w)[0], lambda w: evaluate(w)[1], np.zeros(np.prod(shape)),
                           scg or ScgConfig(max_iters=500, rel_tol=1e-9))
    return LogisticModel(w.reshape(shape), float(l2))


def logistic_loss(model, features, labels):
    """Training objective (mean cross-entropy plus the ridge term) at ``model``."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    Xa = np.hstack([np.ones((X.shape[0], 1)), X])
    onehot = np.eye(N_CLASSES)[np.asarray(labels, dtype=int).ravel()]
    return _logistic_loss(model.weights, Xa, onehot, model.l2)[0]


class LogisticClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression over the Hypo/Eu/Hyper codes.

    Parameters
    ----------
    l2 : float, default=1e-4
        Ridge penalty on the non-bias weights.
    """

    def __init__(self, l2=1e-4):
        self.l2 = l2

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.model_ = logistic_train(X, y, self.l2)
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X))


# --------------------------------------------------------------------------
# Kernel CCA


@dataclass(frozen=True)
class KccaModel:
    train_V: np.ndarray
    train_S: np.ndarray
    kernel_v: object  # KernelParams or "linear"
    kernel_s: object
    reg: float
    d: int
    proj_v: np.ndarray
    proj_s: np.ndarray
    correlations: np.ndarray

    def train_projections(self, with_side=True):
        """Projections of the training points, consistent with :func:`kcca_project`."""
        Pv = _center_train(_gram(self.train_V, self.train_V, self.kernel_v)) @ self.proj_v
        if not with_side:
            return Pv
        Ps = _center_train(_gram(self.train_S, self.train_S, self.kernel_s)) @ self.proj_s
        return 0.5 * (Pv + Ps)


def _gram(X, Z, kernel):
    if isinstance(kernel, str):
        if kernel != LINEAR:
            raise ValueError(f"unknown kernel {kernel!r}")
        return X @ Z.T
    return cross_kernel(X, Z, kernel)


def _center_train(K):
    return K - K.mean(axis=0)[None, :] - K.mean(axis=1)[:, None] + K.mean()


def _center_cross(Kx, Ktrain):
    """Center a (m, n) cross-kernel consistently with the centered training kernel."""
    return Kx - Kx.mean(axis=1)[:, None] - Ktrain.mean(axis=0)[None, :] + Ktrain.mean()


def _resolve_kernel(kernel, X):
    if kernel is None:
        return KernelParams.from_values(1.0, median_inv_lengthscale(X), jitter=0.0)
    if isinstance(kernel, (str, KernelParams)):
        return kernel
    raise TypeError(f"kernel must be KernelParams or {LINEAR!r}, got {type(kernel).__name__}")


def _eig_reduce(Kc):
    try:
        lam, U = np.linalg.eigh(Kc)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedKernelError(f"eigen-solver failed ({exc}); try a larger reg") from exc
    if not np.all(np.isfinite(lam)) or lam[-1] <= 0:
        raise IllConditionedKernelError("centered kernel has no positive spectrum; try a larger reg")
    keep = lam > EIG_RTOL * lam[-1]
    return lam[keep], U[:, keep]


def kcca_fit(V, S, kernel_v=None, kernel_s=None, reg=1e-3, d=2):
    """Regularized kernel CCA on centered kernels.

    Solves ``max a' Kv Ks b`` subject to ``a' (Kv^2 + reg Kv) a = 1`` and the
    matching constraint on ``b``. Both kernels are expanded in their nonzero
    eigenvectors, after which the problem is a singular value decomposition
    whose singular values are the canonical correlations.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = V.shape[0]
    if S.shape[0] != n:
        raise InputShapeError(f"V has {n} rows but S has {S.shape[0]}")
    if S.shape[1] == 0:
        raise InputShapeError("KCCA needs at least one context column")
    if not reg > 0:
        raise ValueError("reg must be positive")
    d = int(d)
    if d < 1 or n < d + 1:
        raise InputShapeError(f"need n >= d + 1 (n={n}, d={d})")
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(S))):
        raise NumericInputError("KCCA inputs must be finite")
    kernel_v = _resolve_kernel(kernel_v, V)
    kernel_s = _resolve_kernel(kernel_s, S)

    lam_v, U_v = _eig_reduce(_center_train(_gram(V, V, kernel_v)))
    lam_s, U_s = _eig_reduce(_center_train(_gram(S, S, kernel_s)))
    shrink_v = np.sqrt(lam_v / (lam_v + reg))
    shrink_s = np.sqrt(lam_s / (lam_s + reg))
    C = shrink_v[:, None] * (U_v.T @ U_s) * shrink_s[None, :]
    try:
        A, corr, Bt = np.linalg.svd(C, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedKernelError(f"SVD failed ({exc}); try a larger reg") from exc

    available = corr.size
    if d > available:
        log.warning("only %d canonical directions available; reducing d from %d", available, d)
        d = available
    # back-substitute: coefficients = U diag(1 / sqrt(lam^2 + reg lam)) * singular vectors
    proj_v = U_v @ (A[:, :d] / np.sqrt(lam_v ** 2 + reg * lam_v)[:, None])
    proj_s = U_s @ (Bt[:d].T / np.sqrt(lam_s ** 2 + reg * lam_s)[:, None])
    return KccaModel(V.copy(), S.copy(), kernel_v, kernel_s, float(reg), d, proj_v, proj_s,
                     np.clip(corr[:d], 0.0, None))


def kcca_project(model, v_new, s_new=None):
    """Project new points onto the canonical directions.

    A single vector returns a d-vector; a matrix of rows returns (m, d).
    When ``s_new`` is given, the context-side projection is averaged in.
    """
    v_new = np.asarray(v_new, dtype=float)
    single = v_new.ndim == 1
    Vx = np.atleast_2d(v_new)
    if Vx.shape[1] != model.train_V.shape[1]:
        raise InputShapeError(f"v_new has {Vx.shape[1]} features, model expects {model.train_V.shape[1]}")
    Kv = _gram(model.train_V, model.train_V, model.kernel_v)
    out = _center_cross(_gram(Vx, model.train_V, model.kernel_v), Kv) @ model.proj_v
    if s_new is not None:
        Sx = np.atleast_2d(np.asarray(s_new, dtype=float))
        if Sx.shape != (Vx.shape[0], model.train_S.shape[1]):
            raise InputShapeError(f"s_new shape {Sx.shape} does not match ({Vx.shape[0]}, {model.train_S.shape[1]})")
        Ks = _gram(model.train_S, model.train_S, model.kernel_s)
        out = 0.5 * (out + _center_cross(_gram(Sx, model.train_S, model.kernel_s), Ks) @ model.proj_s)
    return out[0] if single else out


class KCCATransformer(BaseEstimator, TransformerMixin):
    """Kernel CCA between a glucose view and a context view.

    ``fit(V, S)`` learns the canonical directions; ``transform(V, S=None)``
    returns the projections, averaging both views when ``S`` is supplied.

    Parameters
    ----------
    n_components : int, default=2
    reg : float, default=1e-3
    kernel : {"rbf", "linear"}, default="rbf"
        RBF kernels use the median heuristic bandwidth per view.
    """

    def __init__(self, n_components=2, reg=1e-3, kernel="rbf"):
        self.n_components = n_components
        self.reg = reg
        self.kernel = kernel

    def fit(self, V, S):
        V = check_array(V)
        S = check_array(S)
        kern = None if self.kernel == "rbf" else self.kernel
        self.model_ = kcca_fit(V, S, kern, kern, self.reg, self.n_components)
        self.correlations_ = self.model_.correlations
        self.n_features_in_ = V.shape[1]
        return self

    def transform(self, V, S=None):
        check_is_fitted(self, "model_")
        return kcca_project(self.model_, check_array(V), None if S is None else check_array(S))

    def fit_transform(self, V, S=None, **fit_params):
        return self.fit(V, S).transform(V, S)
