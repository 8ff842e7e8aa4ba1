import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glucoctx.optim import ScgConfig, finite_diff_check, scg_minimize, scg_minimize_batch


def rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def rosenbrock_grad(x):
    return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])


def random_spd(rng, dim):
    A = rng.normal(size=(dim, dim))
    return A @ A.T + 0.1 * np.eye(dim), rng.normal(size=dim)


def non_increasing(values):
    return all(b <= a for a, b in zip(values, values[1:]))


class TestScgConfig:
    @pytest.mark.parametrize("kwargs", [{"sigma0": 0}, {"lambda_init": -1}, {"rel_tol": 0},
                                        {"grad_tol": -1e-9}, {"max_iters": 0}])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ScgConfig(**kwargs)


class TestScgMinimize:
    def test_quadratic(self):
        x, f, trace = scg_minimize(lambda x: 0.5 * x @ x, lambda x: x, np.array([3.0, 4.0]))
        assert np.linalg.norm(x) <= 1e-8
        assert f <= 1e-8
        assert trace.iterations <= 50 and trace.converged

    def test_rosenbrock(self):
        x, _, trace = scg_minimize(rosenbrock, rosenbrock_grad, np.array([-1.2, 1.0]),
                                   ScgConfig(max_iters=2000, rel_tol=1e-12, grad_tol=1e-10))
        assert np.linalg.norm(x - 1.0) <= 1e-4
        assert non_increasing(trace.objective_values)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), dim=st.integers(1, 20))
    def test_convex_quadratics(self, seed, dim):
        rng = np.random.default_rng(seed)
        A, b = random_spd(rng, dim)
        x, f, trace = scg_minimize(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, rng.normal(size=dim),
                                   ScgConfig(max_iters=10 * dim, rel_tol=1e-14, grad_tol=1e-6))
        assert np.linalg.norm(A @ x - b) <= 1e-6
        assert non_increasing(trace.objective_values)

    def test_never_above_start(self, rng):
        # a nonconvex function with many local minima
        f = lambda x: np.sum(np.sin(3 * x) + 0.1 * x ** 2)
        g = lambda x: 3 * np.cos(3 * x) + 0.2 * x
        for _ in range(10):
            x0 = rng.normal(scale=3, size=4)
            _, f_star, trace = scg_minimize(f, g, x0)
            assert f_star <= f(x0)
            assert non_increasing(trace.objective_values)

    def test_deterministic(self):
        runs = [scg_minimize(rosenbrock, rosenbrock_grad, np.array([-1.2, 1.0]), ScgConfig(max_iters=60))
                for _ in range(2)]
        assert runs[0][0].tobytes() == runs[1][0].tobytes()
        assert runs[0][2].objective_values == runs[1][2].objective_values

    def test_max_iters_reason(self):
        _, _, trace = scg_minimize(rosenbrock, rosenbrock_grad, np.array([-1.2, 1.0]), ScgConfig(max_iters=3))
        assert trace.termination_reason == "max_iters" and not trace.converged

    def test_nonfinite_aborts_with_best_so_far(self):
        # finite only on x > -1; the first long step overshoots into the NaN region
        f = lambda x: float(np.sum((x + 0.5) ** 2)) if np.all(x > -1) else np.nan
        g = lambda x: 2 * (x + 0.5) if np.all(x > -1) else np.full_like(x, np.nan)
        x, f_star, trace = scg_minimize(f, g, np.array([5.0]))
        assert np.isfinite(f_star) and f_star <= f(np.array([5.0]))

    def test_nonfinite_start(self):
        _, _, trace = scg_minimize(lambda x: np.inf, lambda x: x, np.array([1.0]))
        assert trace.termination_reason == "nonfinite"

    def test_gradient_tolerance_at_start(self):
        x, _, trace = scg_minimize(lambda x: 0.5 * x @ x, lambda x: x, np.zeros(3))
        assert trace.termination_reason == "grad" and trace.iterations == 0


class TestScgBatch:
    def test_rows_match_scalar_runs(self, rng):
        dims = 4
        problems = [random_spd(rng, dims) for _ in range(5)]
        X0 = rng.normal(size=(5, dims))

        def fg(X):
            f = np.array([0.5 * x @ A @ x - b @ x for x, (A, b) in zip(X, problems)])
            return f, np.array([A @ x - b for x, (A, b) in zip(X, problems)])

        cfg = ScgConfig(max_iters=30, rel_tol=1e-12)
        X, f, converged = scg_minimize_batch(fg, X0, cfg)
        for i, (A, b) in enumerate(problems):
            x_ref, f_ref, _ = scg_minimize(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, X0[i], cfg)
            np.testing.assert_allclose(X[i], x_ref, atol=1e-10)
        assert np.all(converged)


class TestFiniteDiffCheck:
    def test_exact_gradient(self, rng):
        A, b = random_spd(rng, 5)
        err = finite_diff_check(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, rng.normal(size=5), 1e-6)
        assert err <= 1e-9

    def test_scaled_gradient_detected(self, rng):
        A, b = random_spd(rng, 5)
        x = rng.normal(size=5) * 100
        f = lambda x: 0.5 * x @ A @ x - b @ x
        # |g - 2g| / max(1, |2g|) is exactly 1/2 once the gradient is large
        err = finite_diff_check(f, lambda x: 2 * (A @ x - b), x)
        assert err == pytest.approx(0.5, rel=1e-6)

    @pytest.mark.parametrize("step", [1e-6, 1e-5])
    def test_step_robustness(self, step):
        x = np.array([0.3, -0.7, 1.1])
        f = lambda x: np.sum(np.exp(np.sin(x)) * x ** 2)
        g = lambda x: np.exp(np.sin(x)) * (np.cos(x) * x ** 2 + 2 * x)
        assert finite_diff_check(f, g, x, step) <= 1e-4

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: 0.0, lambda x: x, np.zeros(1), 0.0)
