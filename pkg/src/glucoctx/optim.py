"""Scaled Conjugate Gradient (Moller, 1993) and finite-difference checks."""

from dataclasses import dataclass, field

import numpy as np

BETA_MIN = 1e-15
BETA_MAX = 1e100


@dataclass(frozen=True)
class ScgConfig:
    sigma0: float = 1e-4
    lambda_init: float = 1e-6
    max_iters: int = 200
    rel_tol: float = 1e-6
    grad_tol: float = 1e-8

    def __post_init__(self):
        for name in ("sigma0", "lambda_init", "rel_tol", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class OptTrace:
    objective_values: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    termination_reason: str = "max_iters"  # one of tol, grad, max_iters, nonfinite


def _finite(value):
    return value is not None and np.all(np.isfinite(value))


def scg_minimize(f, g, x0, cfg=None):
    """Minimize ``f`` with gradient ``g`` from ``x0``.

    Returns ``(x_star, f_star, trace)``. Steps are only accepted when they do
    not increase ``f``, so ``trace.objective_values`` is non-increasing and
    ``f_star <= f(x0)``. The routine is deterministic.
    """
    cfg = cfg or ScgConfig()
    x = np.array(x0, dtype=float, copy=True)
    nparams = x.size
    trace = OptTrace()

    fold = float(f(x))
    grad_new = np.asarray(g(x), dtype=float)
    if not (np.isfinite(fold) and _finite(grad_new)):
        trace.termination_reason = "nonfinite"
        return x, fold, trace
    trace.objective_values.append(fold)
    if np.linalg.norm(grad_new) < cfg.grad_tol:
        trace.converged, trace.termination_reason = True, "grad"
        return x, fold, trace

    grad_old = grad_new.copy()
    d = -grad_new
    beta = cfg.lambda_init
    success = True
    nsuccess = 0
    small_steps = 0
    mu = kappa = theta = 0.0

    for it in range(1, int(cfg.max_iters) + 1):
        trace.iterations = it
        if success:
            mu = float(d @ grad_new)
            kappa = float(d @ d)
            if mu >= 0 or kappa < np.finfo(float).eps:
                d = -grad_new
                mu = float(d @ grad_new)
                kappa = float(d @ d)
            if kappa < np.finfo(float).eps:
                trace.converged, trace.termination_reason = True, "grad"
                break
            sigma = cfg.sigma0 / np.sqrt(kappa)
            g_plus = np.asarray(g(x + sigma * d), dtype=float)
            if not _finite(g_plus):
                trace.termination_reason = "nonfinite"
                break
            theta = float(d @ (g_plus - grad_new)) / sigma

        # raise the effective curvature until it is positive
        delta = theta + beta * kappa
        if delta <= 0:
            delta = beta * kappa
            beta = beta - theta / kappa
        alpha = -mu / delta

        x_new = x + alpha * d
        f_new = float(f(x_new))
        if np.isfinite(f_new):
            comparison = 2.0 * (f_new - fold) / (alpha * mu)
        else:
            comparison = -np.inf

        if comparison >= 0 and f_new <= fold:
            success = True
            nsuccess += 1
            x = x_new
            decrease = fold - f_new
            fold = f_new
            trace.objective_values.append(f_new)
            grad_old = grad_new
            grad_new = np.asarray(g(x), dtype=float)
            if not _finite(grad_new):
                trace.termination_reason = "nonfinite"
                break
            if np.linalg.norm(grad_new) < cfg.grad_tol:
                trace.converged, trace.termination_reason = True, "grad"
                break
            if decrease < cfg.rel_tol * max(abs(f_new), np.finfo(float).tiny):
                small_steps += 1
                if small_steps >= 3:
                    trace.converged, trace.termination_reason = True, "tol"
                    break
            else:
                small_steps = 0
        else:
            success = False

        if comparison < 0.25:
            beta = min(4.0 * beta, BETA_MAX)
        if comparison > 0.75:
            beta = max(0.5 * beta, BETA_MIN)
        if beta >= BETA_MAX:
            # no representable step makes progress
            trace.converged, trace.termination_reason = True, "tol"
            break

        if nsuccess == nparams:
            d = -grad_new
            nsuccess = 0
        elif success:
            gamma = float((grad_old - grad_new) @ grad_new) / mu
            d = gamma * d - grad_new

    return x, fold, trace


def numerical_grad(f, x, step=1e-6):
    x = np.array(x, dtype=float, copy=True)
    out = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + step
        fp = f(x)
        x[k] = orig - step
        fm = f(x)
        x[k] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out


def finite_diff_check(f, g, x, step=1e-6):
    """Max over components of ``|fd - g| / max(1, |g|)`` using central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = np.asarray(g(np.array(x, dtype=float)), dtype=float).ravel()
    fd = numerical_grad(f, x, step).ravel()
    return float(np.max(np.abs(fd - analytic) / np.maximum(1.0, np.abs(analytic))))


def scg_minimize_batch(fg, X0, cfg=None):
    """Run independent SCG minimizations for every row of ``X0`` at once.

    ``fg(X)`` maps an (m, p) array to ``(f, G)`` with ``f`` of shape (m,) and
    ``G`` of shape (m, p); row ``i`` of the output must depend only on row
    ``i`` of the input. Each row follows exactly the iteration of
    :func:`scg_minimize`. Returns ``(X_star, f_star, converged)``.
    """
    cfg = cfg or ScgConfig()
    X = np.array(X0, dtype=float, copy=True)
    m, p = X.shape
    eps = np.finfo(float).eps

    fold, grad_new = fg(X)
    fold = np.array(fold, dtype=float)
    grad_new = np.array(grad_new, dtype=float)
    bad = ~(np.isfinite(fold) & np.all(np.isfinite(grad_new), axis=1))
    converged = np.linalg.norm(grad_new, axis=1) < cfg.grad_tol
    active = ~converged & ~bad
    grad_old = grad_new.copy()
    d = -grad_new
    beta = np.full(m, cfg.lambda_init)
    success = np.ones(m, dtype=bool)
    nsuccess = np.zeros(m, dtype=int)
    small_steps = np.zeros(m, dtype=int)
    mu = np.zeros(m)
    kappa = np.ones(m)
    theta = np.zeros(m)

    for _ in range(int(cfg.max_iters)):
        if not np.any(active):
            break
        fresh = active & success
        mu_f = np.einsum("ij,ij->i", d, grad_new)
        kappa_f = np.einsum("ij,ij->i", d, d)
        restart = fresh & ((mu_f >= 0) | (kappa_f < eps))
        d[restart] = -grad_new[restart]
        mu = np.where(fresh, np.einsum("ij,ij->i", d, grad_new), mu)
        kappa = np.where(fresh, np.einsum("ij,ij->i", d, d), kappa)
        tiny = fresh & (kappa < eps)
        converged |= tiny
        active &= ~tiny
        fresh &= ~tiny

        if np.any(fresh):
            sigma = np.where(fresh, cfg.sigma0 / np.sqrt(np.where(fresh, kappa, 1.0)), 0.0)
            _, g_plus = fg(X + sigma[:, None] * d)
            g_plus = np.asarray(g_plus, dtype=float)
            theta_f = np.einsum("ij,ij->i", d, g_plus - grad_new) / np.where(fresh, sigma, 1.0)
            nonfinite = fresh & ~np.isfinite(theta_f)
            active &= ~nonfinite
            fresh &= ~nonfinite
            theta = np.where(fresh, theta_f, theta)

        delta = theta + beta * kappa
        nonpos = active & (delta <= 0)
        delta = np.where(nonpos, beta * kappa, delta)
        beta = np.where(nonpos, beta - theta / kappa, beta)
        alpha = np.where(active, -mu / np.where(active, delta, 1.0), 0.0)

        X_new = X + alpha[:, None] * d
        f_new, g_at_new = fg(X_new)
        f_new = np.asarray(f_new, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            comparison = np.where(np.isfinite(f_new), 2.0 * (f_new - fold) / (alpha * mu), -np.inf)
        comparison = np.where(active, comparison, 0.0)
        accept = active & (comparison >= 0) & (f_new <= fold)
        g_at_new = np.asarray(g_at_new, dtype=float)

        decrease = fold - f_new
        X[accept] = X_new[accept]
        fold = np.where(accept, f_new, fold)
        grad_old = np.where(accept[:, None], grad_new, grad_old)
        grad_new = np.where(accept[:, None], g_at_new, grad_new)
        nsuccess += accept
        success = np.where(active, accept, success)

        gbad = accept & ~np.all(np.isfinite(grad_new), axis=1)
        active &= ~gbad
        gdone = accept & ~gbad & (np.linalg.norm(np.where(gbad[:, None], 0.0, grad_new), axis=1) < cfg.grad_tol)
        converged |= gdone
        active &= ~gdone
        small = accept & (decrease < cfg.rel_tol * np.maximum(np.abs(f_new), np.finfo(float).tiny))
        small_steps = np.where(accept, np.where(small, small_steps + 1, 0), small_steps)
        tol_done = active & (small_steps >= 3)
        converged |= tol_done
        active &= ~tol_done

        beta = np.where(active & (comparison < 0.25), np.minimum(4.0 * beta, BETA_MAX), beta)
        beta = np.where(active & (comparison > 0.75), np.maximum(0.5 * beta, BETA_MIN), beta)
        stalled = active & (beta >= BETA_MAX)
        converged |= stalled
        active &= ~stalled

        reset = active & (nsuccess == p)
        d[reset] = -grad_new[reset]
        nsuccess[reset] = 0
        upd = active & ~reset & success
        if np.any(upd):
            gamma = np.einsum("ij,ij->i", grad_old[upd] - grad_new[upd], grad_new[upd]) / mu[upd]
            d[upd] = gamma[:, None] * d[upd] - grad_new[upd]

    return X, fold, converged
