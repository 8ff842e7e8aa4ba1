"""Shared-latent-space Gaussian process over glucose and context views.

A latent matrix Q (one row per training window) is mapped by two independent
zero-mean GPs onto the glucose view V and the context view S. Q and both sets
of kernel hyperparameters are fit by minimizing

    L = L_v + L_s + 1/2 sum_i |q_i|^2
    L_v = D_v/2 ln|K_v| + 1/2 tr(K_v^-1 V V^T)     (L_s analogous)

with scaled conjugate gradients. GP regression heads on Q then predict the
next glucose value and one-vs-rest glycemic class scores.

Note on the latent gradient: differentiating L_v gives the bracket
``D_v K^-1 - K^-1 V V^T K^-1`` (the coefficient is the number of columns of the
view, not the number of windows); the finite-difference tests pin this down.
Throughout, ``n`` is the number of training windows.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, lapack
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import __version__
from .data import (
    LABEL_PRIORITY,
    GlycemicLabel,
    StandardizationStats,
    categorize_array,
    standardize_apply,
    standardize_fit,
    standardize_inverse,
)
from .exceptions import IllConditionedKernelError, InputShapeError
from .gp import GpModel, gp_fit_hyper, safe_cholesky, squash
from .kernels import (
    DEFAULT_RELATIVE_JITTER,
    KernelParams,
    cross_kernel,
    latent_grad_from_bracket,
    median_inv_lengthscale,
    sq_dists,
)
from .optim import ScgConfig, scg_minimize, scg_minimize_batch

log = logging.getLogger(__name__)

CONTEXT_MODES = ("none", "early_fusion", "shared_latent")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 5
    max_iters: int = 200
    rel_tol: float = 1e-6
    seed: int = 0
    context_mode: str = "shared_latent"
    jitter: float = DEFAULT_RELATIVE_JITTER
    max_points: int = 0  # 0 keeps every window; otherwise evenly strided subsample
    head_restarts: int = 3
    head_max_iters: int = 100
    infer_max_iters: int = 100

    def __post_init__(self):
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"context_mode must be one of {CONTEXT_MODES}, got {self.context_mode!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


# --------------------------------------------------------------------------
# objective and gradient


def _has_view(Y):
    return Y is not None and Y.ndim == 2 and Y.shape[1] > 0


def _chol_inverse(L):
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise IllConditionedKernelError("could not invert kernel matrix from its Cholesky factor")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def view_terms(Q, params, Y, view, need_grad=True):
    """Negative log-likelihood of one view and (optionally) its gradients.

    Returns ``(value, dQ, dlog_hyper)``; the gradients are None when
    ``need_grad`` is False.
    """
    n, D = Y.shape
    D2 = sq_dists(Q)
    K0 = params.signal_var * np.exp(-0.5 * params.inv_lengthscale * D2)
    K = K0.copy()
    K[np.diag_indices(n)] += params.jitter
    L = safe_cholesky(K, view=view)
    alpha = cho_solve((L, True), Y)
    value = D * np.sum(np.log(np.diag(L))) + 0.5 * float(np.sum(Y * alpha))
    if not need_grad:
        return value, None, None
    G = 0.5 * (D * _chol_inverse(L) - alpha @ alpha.T)
    dQ = latent_grad_from_bracket(Q, params, G, K0)
    GK = G * K0
    dhyper = np.array([np.sum(GK), -0.5 * params.inv_lengthscale * np.sum(GK * D2)])
    return value, dQ, dhyper


def objective(Q, params_v, params_s, V, S, include_prior=True):
    """Negative log posterior of the latent points and both views' hyperparameters."""
    Q, V, S = _check_shapes(Q, V, S)
    value = view_terms(Q, params_v, V, "glucose", need_grad=False)[0]
    if _has_view(S):
        value += view_terms(Q, params_s, S, "context", need_grad=False)[0]
    if include_prior:
        value += 0.5 * float(np.sum(Q * Q))
    return value


def objective_grad(Q, params_v, params_s, V, S, include_prior=True):
    """Gradient of :func:`objective`: ``(dQ, (dhyper_v, dhyper_s))``.

    Hyper-gradients are with respect to (log signal variance, log inverse
    lengthscale); ``dhyper_s`` is None when the context view is empty.
    """
    Q, V, S = _check_shapes(Q, V, S)
    _, dQ, dv = view_terms(Q, params_v, V, "glucose")
    ds = None
    if _has_view(S):
        _, dQs, ds = view_terms(Q, params_s, S, "context")
        dQ = dQ + dQs
    if include_prior:
        dQ = dQ + Q
    return dQ, (dv, ds)


def _check_shapes(Q, V, S):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if S is not None:
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if S.shape[0] != Q.shape[0]:
            raise InputShapeError(f"S has {S.shape[0]} rows, Q has {Q.shape[0]}")
    if V.shape[0] != Q.shape[0]:
        raise InputShapeError(f"V has {V.shape[0]} rows, Q has {Q.shape[0]}")
    return Q, V, S


class _PackedObjective:
    """Objective over the flat vector [Q, log hyper (glucose), log hyper (context)].

    Caches the last evaluation because SCG asks for f and g at the same point.
    """

    def __init__(self, V, S, q, jitter_v, jitter_s):
        self.V, self.S, self.q = V, S, q
        self.n = V.shape[0]
        self.two_views = _has_view(S)
        self.jitter_v, self.jitter_s = jitter_v, jitter_s
        self._key = None
        self._value = None

    def pack(self, Q, params_v, params_s):
        parts = [Q.ravel(), params_v.to_array()]
        if self.two_views:
            parts.append(params_s.to_array())
        return np.concatenate(parts)

    def unpack(self, x):
        nq = self.n * self.q
        Q = x[:nq].reshape(self.n, self.q)
        params_v = KernelParams(x[nq], x[nq + 1], self.jitter_v)
        params_s = KernelParams(x[nq + 2], x[nq + 3], self.jitter_s) if self.two_views else None
        return Q, params_v, params_s

    def _evaluate(self, x):
        key = x.tobytes()
        if key == self._key:
            return self._value
        try:
            Q, pv, ps = self.unpack(x)
            fv, dQ, dv = view_terms(Q, pv, self.V, "glucose")
            value = fv + 0.5 * float(np.sum(Q * Q))
            grads = [dQ + Q, dv]
            if self.two_views:
                fs, dQs, ds = view_terms(Q, ps, self.S, "context")
                value += fs
                grads[0] = grads[0] + dQs
                grads.append(ds)
            result = (value, np.concatenate([grads[0].ravel()] + grads[1:]))
        except (IllConditionedKernelError, FloatingPointError, OverflowError, ValueError):
            result = (np.inf, np.full(x.size, np.nan))
        self._key, self._value = key, result
        return result

    def f(self, x):
        return self._evaluate(x)[0]

    def g(self, x):
        return self._evaluate(x)[1]


# --------------------------------------------------------------------------
# initialization and training


def gradcheck_instance(seed, jitter=1e-3):
    """Random small two-view problem ``(Q, pv, ps, V, S)`` for gradient checks.

    A jitter of 1e-3 keeps the kernels well conditioned enough that central
    differences at step 1e-6 are not dominated by rounding.
    """
    rng = np.random.default_rng(seed)
    n, q = int(rng.integers(2, 9)), int(rng.integers(1, 4))
    Dv, Ds = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    pv = KernelParams(rng.uniform(-0.5, 0.5), rng.uniform(-1, 0.5), jitter)
    ps = KernelParams(rng.uniform(-0.5, 0.5), rng.uniform(-1, 0.5), jitter)
    return rng.normal(size=(n, q)), pv, ps, rng.normal(size=(n, Dv)), rng.normal(size=(n, Ds))


def init_latent(V, S, q, seed, jitter=1e-4):
    """PCA scores of the column-standardized ``[V | S]`` plus seeded noise of scale ``jitter``."""
    X = np.asarray(V, dtype=float)
    if S is not None and np.asarray(S).size:
        X = np.hstack([X, np.asarray(S, dtype=float)])
    n = X.shape[0]
    if q > X.shape[1] or q > max(n - 1, 1):
        raise InputShapeError(f"latent_dim {q} exceeds min(D_v + D_s, n - 1) for data of shape {X.shape}")
    rng = np.random.default_rng(seed)
    noise = jitter * rng.standard_normal((n, q))
    Xs = standardize_apply(standardize_fit(X), X)
    if not np.any(np.abs(Xs) > 0):
        log.warning("latent initialization: data has zero variance, using noise only")
        return noise
    _, sing, Vt = np.linalg.svd(Xs, full_matrices=False)
    # fix the sign of each component so the result does not depend on LAPACK internals
    signs = np.sign(Vt[:q][np.arange(q), np.argmax(np.abs(Vt[:q]), axis=1)])
    signs[signs == 0] = 1.0
    return Xs @ (Vt[:q].T * signs) + noise


@dataclass(frozen=True)
class LatentModel:
    Q: np.ndarray
    params_v: KernelParams
    params_s: KernelParams  # None unless context_mode == "shared_latent"
    V_ref: np.ndarray  # standardized training view the glucose GP reconstructs
    S_ref: np.ndarray  # standardized context view (n, 0) when unused
    head_reg: GpModel
    head_cls: tuple
    scaler: dict  # "v", "s", "y" -> StandardizationStats
    config: TrainConfig
    objective_value: float
    converged: bool
    objective_trace: tuple = field(default=(), compare=False)
    provenance: dict = field(default_factory=dict, compare=False)  # set by load_model from the archive

    @property
    def latent_dim(self):
        return self.Q.shape[1]

    @property
    def window_len(self):
        return self.scaler["v"].mean.size

    @property
    def n_side(self):
        return self.scaler["s"].mean.size

    def recompute_objective(self):
        S = self.S_ref if self.config.context_mode == "shared_latent" else None
        return objective(self.Q, self.params_v, self.params_s, self.V_ref, S)

    @cached_property
    def _views(self):
        """Per-view (reference Q, params, Y, alpha, K^-1) for test-time inference."""
        out = {}
        for name, params, Y in (("v", self.params_v, self.V_ref), ("s", self.params_s, self.S_ref)):
            if params is None or not _has_view(Y):
                continue
            K = cross_kernel(self.Q, self.Q, params)
            K[np.diag_indices_from(K)] += params.jitter
            L = safe_cholesky(K, view=name)
            out[name] = (params, Y, cho_solve((L, True), Y), _chol_inverse(L))
        return out


def _subsample_index(n, max_points):
    if not max_points or n <= max_points:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, max_points)).astype(int))


def _glucose_view(model_mode, Vs, Ss):
    if model_mode == "early_fusion":
        return np.hstack([Vs, Ss])
    return Vs


def train(V, S, targets, config=None, labels=None):
    """Fit the latent space, then the regression and classification heads.

    ``V`` holds raw glucose windows (mg/dl), ``S`` raw context rows (may have
    zero columns or be None) and ``targets`` the raw target readings.
    ``labels`` overrides the default categorization of ``targets``.
    """
    config = config or TrainConfig()
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] < 2:
        raise InputShapeError(f"V must be an (n >= 2, D_v) matrix, got {V.shape}")
    n_all = V.shape[0]
    S = np.zeros((n_all, 0)) if S is None else np.asarray(S, dtype=float).reshape(n_all, -1)
    targets = np.asarray(targets, dtype=float).ravel()
    if targets.size != n_all:
        raise InputShapeError(f"{targets.size} targets for {n_all} windows")
    mode = config.context_mode
    if mode != "none" and S.shape[1] == 0:
        raise InputShapeError(f"context_mode {mode!r} needs at least one context column")

    labels = categorize_array(targets) if labels is None else np.asarray(labels, dtype=int).ravel()
    idx = _subsample_index(n_all, config.max_points)
    V, S, targets, labels = V[idx], S[idx], targets[idx], labels[idx]
    n = V.shape[0]
    q = config.latent_dim
    scaler = {"v": standardize_fit(V), "s": standardize_fit(S) if S.shape[1] else
              StandardizationStats(np.zeros(0), np.ones(0)), "y": standardize_fit(targets)}
    Vs = standardize_apply(scaler["v"], V)
    Ss = standardize_apply(scaler["s"], S) if S.shape[1] else S

    view_v = _glucose_view(mode, Vs, Ss)
    view_s = Ss if mode == "shared_latent" else None
    q_cap = min(view_v.shape[1] + (view_s.shape[1] if view_s is not None else 0), n - 1)
    if q > q_cap:
        raise InputShapeError(f"latent_dim {q} exceeds min(D_v + D_s, n - 1) = {q_cap}")

    Q0 = init_latent(view_v, view_s, q, config.seed)
    ell = median_inv_lengthscale(Q0)
    params_v = KernelParams(0.0, np.log(ell), config.jitter)
    params_s = KernelParams(0.0, np.log(ell), config.jitter) if view_s is not None else None

    packed = _PackedObjective(view_v, view_s, q, config.jitter, config.jitter)
    x0 = packed.pack(Q0, params_v, params_s)
    x_star, f_star, trace = scg_minimize(packed.f, packed.g, x0,
                                         ScgConfig(max_iters=config.max_iters, rel_tol=config.rel_tol))
    if not trace.converged:
        log.info("latent optimization stopped after %d iterations (%s)", trace.iterations,
                 trace.termination_reason)
    Q, params_v, params_s = packed.unpack(x_star)
    Q = Q.copy()

    y_std = standardize_apply(scaler["y"], targets)
    head_scg = ScgConfig(max_iters=config.head_max_iters, rel_tol=1e-6)
    head_reg = gp_fit_hyper(Q, y_std, noise_init=0.1, restarts=config.head_restarts,
                            seed=config.seed, scg=head_scg)
    onevsrest = np.where(labels[:, None] == np.arange(3)[None, :], 1.0, -1.0)
    shared = gp_fit_hyper(Q, onevsrest, noise_init=0.1, restarts=config.head_restarts,
                          seed=config.seed + 1, scg=head_scg)
    head_cls = tuple(GpModel.build(Q, onevsrest[:, c], shared.params, shared.noise_var) for c in range(3))

    return LatentModel(Q=Q, params_v=params_v, params_s=params_s, V_ref=view_v,
                       S_ref=view_s if view_s is not None else np.zeros((n, 0)),
                       head_reg=head_reg, head_cls=head_cls, scaler=scaler, config=config,
                       objective_value=float(f_star), converged=bool(trace.converged),
                       objective_trace=tuple(trace.objective_values))


# --------------------------------------------------------------------------
# test-time inference


def _prepare_queries(model, V_new, S_new):
    V_new = np.atleast_2d(np.asarray(V_new, dtype=float))
    if V_new.shape[1] != model.window_len:
        raise InputShapeError(f"windows have {V_new.shape[1]} values, model expects {model.window_len}")
    Vs = standardize_apply(model.scaler["v"], V_new)
    Ss = None
    if S_new is not None and model.n_side:
        S_new = np.atleast_2d(np.asarray(S_new, dtype=float))
        if S_new.shape != (V_new.shape[0], model.n_side):
            raise InputShapeError(f"context rows {S_new.shape} do not match ({V_new.shape[0]}, {model.n_side})")
        Ss = standardize_apply(model.scaler["s"], S_new)
    mode = model.config.context_mode
    if mode == "early_fusion":
        if Ss is None:
            raise InputShapeError("an early-fusion model needs context rows at prediction time")
        return np.hstack([Vs, Ss]), None, Vs
    return Vs, (Ss if mode == "shared_latent" else None), Vs


def _view_nll(model, name, Qx, Y):
    """Predictive negative log-likelihood of rows Y at latents Qx, and its gradient."""
    params, _, alpha, Kinv = model._views[name]
    m, D = Y.shape
    k = cross_kernel(Qx, model.Q, params)  # (m, n)
    mu = k @ alpha
    c = k @ Kinv
    var = np.maximum(params.signal_var + params.jitter - np.sum(k * c, axis=1), 1e-12 * params.signal_var)
    r = Y - mu
    rr = np.sum(r * r, axis=1)
    nll = 0.5 * D * np.log(var) + 0.5 * rr / var
    # dk[j]/dq = -theta2 (q - Q_j) k_j
    w = -params.inv_lengthscale * k
    def contract(coef):  # sum_j coef[:, j] * dk_j/dq
        cw = coef * w
        return cw.sum(axis=1)[:, None] * Qx - cw @ model.Q
    dvar = -2.0 * contract(c)
    dmu_r = contract(r @ alpha.T)  # r^T dmu/dq
    grad = (0.5 * D / var - 0.5 * rr / var ** 2)[:, None] * dvar - dmu_r / var[:, None]
    return nll, grad


def infer_latents(model, V_new, S_new=None, return_status=False):
    """Latent coordinates for new windows (batched :func:`infer_latent`)."""
    view_v, view_s, Vs = _prepare_queries(model, V_new, S_new)
    # start at the training window nearest in (standardized) glucose space
    V_train = model.V_ref[:, :model.window_len]
    nearest = np.argmin(sq_dists(Vs, V_train), axis=1)
    Q0 = model.Q[nearest]

    def fg(Qx):
        f, g = _view_nll(model, "v", Qx, view_v)
        if view_s is not None:
            fs, gs = _view_nll(model, "s", Qx, view_s)
            f, g = f + fs, g + gs
        # the latent prior keeps outlying windows from drifting to infinity
        return f + 0.5 * np.sum(Qx * Qx, axis=1), g + Qx

    with np.errstate(over="ignore", invalid="ignore"):
        Qx, f_star, converged = scg_minimize_batch(
            fg, Q0, ScgConfig(max_iters=model.config.infer_max_iters, rel_tol=1e-9))
    ok = np.isfinite(f_star) & np.all(np.isfinite(Qx), axis=1)
    if not np.all(ok):
        log.warning("latent inference failed for %d windows; using nearest-neighbour latents",
                    int(np.sum(~ok)))
        Qx[~ok] = Q0[~ok]
    return (Qx, ok) if return_status else Qx


def infer_latent(model, v_new, s_new=None):
    """Latent point for one new window.

    Minimizes the window's predictive negative log-likelihood under the frozen
    view GPs plus the latent prior; the context term is omitted when ``s_new``
    is None. Training latents and hyperparameters are not changed.
    """
    s = None if s_new is None else np.atleast_2d(s_new)
    return infer_latents(model, np.atleast_2d(v_new), s)[0]


def class_probabilities(model, latents):
    latents = np.atleast_2d(latents)
    scores = np.column_stack([squash(h.predict(latents, return_var=False)[:, 0]) for h in model.head_cls])
    return scores / scores.sum(axis=1, keepdims=True)


def argmax_label(probs):
    """Argmax over (Hypo, Eu, Hyper) with ties resolved Hypo > Hyper > Eu."""
    probs = np.asarray(probs, dtype=float)
    best = max(probs)
    for label in LABEL_PRIORITY:
        if probs[label] == best:
            return label
    raise ValueError("probabilities contain NaN")


def predict_labels(model, V_new, S_new=None):
    probs = class_probabilities(model, infer_latents(model, V_new, S_new))
    return np.array([int(argmax_label(p)) for p in probs], dtype=int), probs


def predict_label(model, window_v, window_s=None):
    labels, probs = predict_labels(model, np.atleast_2d(window_v),
                                   None if window_s is None else np.atleast_2d(window_s))
    return GlycemicLabel(labels[0]), probs[0]


def predict_values(model, V_new, S_new=None, latents=None):
    """Next-value posterior mean and variance in mg/dl for each window."""
    if latents is None:
        latents = infer_latents(model, V_new, S_new)
    mean, var = model.head_reg.predict(latents)
    y = model.scaler["y"]
    return standardize_inverse(y, mean[:, 0]), var * float(y.std[0]) ** 2


def recursive_forecast_batch(model, V_new, S_new=None, horizon=1):
    """Multi-step forecasts for many windows at once.

    Each predicted mean is appended to its window (dropping the oldest value)
    before the next step; context rows are held fixed because future context
    is unobserved. Returns ``(means, variances)``, both of shape (m, horizon).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    windows = np.atleast_2d(np.asarray(V_new, dtype=float)).copy()
    means = np.empty((windows.shape[0], horizon))
    variances = np.empty_like(means)
    for step in range(horizon):
        means[:, step], variances[:, step] = predict_values(model, windows, S_new)
        windows = np.hstack([windows[:, 1:], means[:, step:step + 1]])
    return means, variances


def recursive_forecast(model, window_v, window_s=None, horizon=1):
    """Multi-step forecast for one window as a list of ``(mean, var)`` tuples."""
    s = None if window_s is None else np.atleast_2d(window_s)
    means, variances = recursive_forecast_batch(model, np.atleast_2d(window_v), s, horizon)
    return [(float(m), float(v)) for m, v in zip(means[0], variances[0])]


# --------------------------------------------------------------------------
# serialization


def _params_dict(p):
    return None if p is None else asdict(p)


def save_model(model, path, provenance=None):
    """Write a self-describing ``.npz`` archive (no pickling).

    ``provenance`` is an optional JSON-serializable dict stored verbatim.
    """
    meta = {
        "provenance": provenance or {},
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "config": asdict(model.config),
        "params_v": _params_dict(model.params_v),
        "params_s": _params_dict(model.params_s),
        "head_reg": {"params": asdict(model.head_reg.params), "noise_var": model.head_reg.noise_var},
        "head_cls": [{"params": asdict(h.params), "noise_var": h.noise_var} for h in model.head_cls],
        "objective_value": model.objective_value,
        "converged": model.converged,
        "shapes": {"Q": list(model.Q.shape), "V_ref": list(model.V_ref.shape),
                   "S_ref": list(model.S_ref.shape)},
    }
    arrays = {
        "Q": model.Q, "V_ref": model.V_ref, "S_ref": model.S_ref,
        "head_reg_targets": model.head_reg.targets,
        "head_cls_targets": np.column_stack([h.targets[:, 0] for h in model.head_cls]),
        "objective_trace": np.asarray(model.objective_trace, dtype=float),
    }
    for key, stats in model.scaler.items():
        arrays[f"scaler_{key}_mean"] = stats.mean
        arrays[f"scaler_{key}_std"] = stats.std
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
                 **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {meta.get('format_version')}")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    Q = arrays["Q"]
    scaler = {k: StandardizationStats(arrays[f"scaler_{k}_mean"], arrays[f"scaler_{k}_std"])
              for k in ("v", "s", "y")}
    head_reg = GpModel.build(Q, arrays["head_reg_targets"], KernelParams(**meta["head_reg"]["params"]),
                             meta["head_reg"]["noise_var"])
    head_cls = tuple(
        GpModel.build(Q, arrays["head_cls_targets"][:, c], KernelParams(**h["params"]), h["noise_var"])
        for c, h in enumerate(meta["head_cls"]))
    return LatentModel(
        Q=Q, params_v=KernelParams(**meta["params_v"]),
        params_s=KernelParams(**meta["params_s"]) if meta["params_s"] else None,
        V_ref=arrays["V_ref"], S_ref=arrays["S_ref"], head_reg=head_reg, head_cls=head_cls,
        scaler=scaler, config=TrainConfig(**meta["config"]), objective_value=meta["objective_value"],
        converged=meta["converged"], objective_trace=tuple(arrays["objective_trace"].tolist()),
        provenance=meta["provenance"])


# --------------------------------------------------------------------------
# scikit-learn facade


class MultiSignalGP(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around :func:`train` and the prediction functions.

    ``fit(V, y, S=None)`` takes raw glucose windows, raw target readings in
    mg/dl and optional context rows. ``predict`` returns glycemic label codes,
    ``predict_value`` the next-value posterior mean and ``transform`` the
    inferred latent coordinates.

    Parameters
    ----------
    latent_dim : int, default=5
    context_mode : {"none", "early_fusion", "shared_latent"}, default="shared_latent"
    max_iters : int, default=200
        Iteration budget of the latent-space optimization.
    max_points : int, default=0
        Evenly strided training subsample size; 0 uses every window.
    random_state : int, default=0
    """

    def __init__(self, latent_dim=5, context_mode="shared_latent", max_iters=200, max_points=0,
                 random_state=0):
        self.latent_dim = latent_dim
        self.context_mode = context_mode
        self.max_iters = max_iters
        self.max_points = max_points
        self.random_state = random_state

    def _config(self):
        return TrainConfig(latent_dim=self.latent_dim, context_mode=self.context_mode,
                           max_iters=self.max_iters, max_points=self.max_points, seed=self.random_state)

    def fit(self, V, y, S=None):
        V, y = check_X_y(V, y, y_numeric=True)
        if S is not None:
            S = check_array(S, ensure_min_features=0)
        self.model_ = train(V, S, y, self._config())
        self.classes_ = np.arange(3)
        self.n_features_in_ = V.shape[1]
        return self

    def transform(self, V, S=None):
        check_is_fitted(self, "model_")
        return infer_latents(self.model_, check_array(V), S)

    def predict_proba(self, V, S=None):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_array(V), S)[1]

    def predict(self, V, S=None):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_array(V), S)[0]

    def predict_value(self, V, S=None, return_var=False):
        check_is_fitted(self, "model_")
        mean, var = predict_values(self.model_, check_array(V), S)
        return (mean, var) if return_var else mean

    def forecast(self, V, S=None, horizon=1):
        check_is_fitted(self, "model_")
        return recursive_forecast_batch(self.model_, check_array(V), S, horizon)
