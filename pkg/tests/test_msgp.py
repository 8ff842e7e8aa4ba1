import logging

import numpy as np
import pytest
from scipy.linalg import subspace_angles
from sklearn.base import clone

from glucoctx import msgp
from glucoctx.data import GlycemicLabel, standardize_apply, standardize_fit
from glucoctx.exceptions import IllConditionedKernelError, InputShapeError
from glucoctx.kernels import KernelParams
from glucoctx.optim import ScgConfig, finite_diff_check, scg_minimize

from .oracles import single_view_gplvm


def two_view_data(seed, n=40, noise=2.0):
    """Glucose windows and context driven by one latent sinusoid."""
    r = np.random.default_rng(seed)
    t = np.arange(n + 8) * 0.25 + r.uniform(0, 6)
    z = np.sin(t) + 0.1 * r.normal(size=t.size)
    V = np.column_stack([120 + 60 * np.tanh(z[k:k + n]) for k in range(4)]) + noise * r.normal(size=(n, 4))
    S = np.column_stack([np.tanh(z[4:4 + n]), z[4:4 + n] ** 2]) + 0.05 * r.normal(size=(n, 2))
    y = 120 + 60 * np.tanh(z[6:6 + n]) + noise * r.normal(size=n)
    return V, S, y


FAST = dict(max_iters=40, head_restarts=1, head_max_iters=40, infer_max_iters=60)


packed_instance = msgp.gradcheck_instance


class TestObjective:
    def test_all_zero_fixed_point(self):
        p = KernelParams(0.0, 0.0, 0.0)
        assert msgp.objective([[0.0]], p, p, [[0.0]], [[0.0]]) == 0.0

    def test_single_nonzero_reading(self):
        p = KernelParams(0.0, 0.0, 0.0)
        assert msgp.objective([[0.0]], p, p, [[2.0]], [[0.0]]) == pytest.approx(2.0, abs=1e-15)

    def test_missing_context_equals_single_view_oracle(self):
        for seed in range(5):
            Q, pv, _, V, _ = packed_instance(seed)
            n, q = Q.shape
            x = np.concatenate([Q.ravel(), pv.to_array()])
            expected = single_view_gplvm(x, n, q, V, pv.jitter)[0]
            for S in (None, np.zeros((n, 0))):
                assert msgp.objective(Q, pv, None, V, S) == pytest.approx(expected, rel=1e-10)

    def test_prior_decomposition(self, rng):
        Q, pv, ps, V, S = packed_instance(7)
        diff = msgp.objective(Q, pv, ps, V, S) - msgp.objective(Q, pv, ps, V, S, include_prior=False)
        assert abs(diff - 0.5 * np.sum(Q ** 2)) <= 1e-12

    def test_singular_kernel_names_view(self):
        p = KernelParams(0.0, 0.0, 0.0)
        Q = np.zeros((2, 1))
        with pytest.raises(IllConditionedKernelError) as info:
            msgp.objective(Q, p, p, np.ones((2, 1)), np.ones((2, 1)))
        assert info.value.view == "glucose"
        assert "glucose" in str(info.value)

    def test_shape_mismatch(self):
        p = KernelParams()
        with pytest.raises(InputShapeError):
            msgp.objective(np.zeros((3, 1)), p, p, np.zeros((2, 1)), None)


class TestObjectiveGrad:
    def test_zero_at_origin(self):
        p = KernelParams(0.0, 0.0, 1e-3)
        dQ, _ = msgp.objective_grad(np.zeros((4, 2)), p, p, np.zeros((4, 3)), np.zeros((4, 2)))
        np.testing.assert_array_equal(dQ, 0.0)

    def test_prior_gradient_is_q(self):
        # one point: the data term has no latent gradient, so the difference is exactly Q
        _, pv, ps, _, _ = packed_instance(3)
        Q, V, S = np.array([[0.7, -1.3]]), np.array([[0.4, 2.0]]), np.array([[1.1]])
        with_prior, _ = msgp.objective_grad(Q, pv, ps, V, S)
        without, _ = msgp.objective_grad(Q, pv, ps, V, S, include_prior=False)
        np.testing.assert_array_equal(with_prior - without, Q)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        Q, pv, ps, V, S = packed_instance(seed)
        packed = msgp._PackedObjective(V, S, Q.shape[1], pv.jitter, ps.jitter)
        x = packed.pack(Q, pv, ps)
        assert finite_diff_check(packed.f, packed.g, x, step=1e-6) <= 1e-4

    def test_matches_independent_gradient(self):
        Q, pv, _, V, _ = packed_instance(11)
        n, q = Q.shape
        dQ, (dv, ds) = msgp.objective_grad(Q, pv, None, V, None)
        _, ref = single_view_gplvm(np.concatenate([Q.ravel(), pv.to_array()]), n, q, V, pv.jitter)
        np.testing.assert_allclose(np.concatenate([dQ.ravel(), dv]), ref, rtol=1e-9, atol=1e-10)
        assert ds is None

    def test_view_dimension_coefficient(self):
        # with D_v = 3 columns the bracket scales K^-1 by 3, not by the number of points
        Q, pv, _, _, _ = packed_instance(2)
        n, q = Q.shape
        V = np.random.default_rng(0).normal(size=(n, 3))
        packed = msgp._PackedObjective(V, None, q, pv.jitter, pv.jitter)
        x = packed.pack(Q, pv, None)
        assert finite_diff_check(packed.f, packed.g, x, step=1e-6) <= 1e-4


class TestInitLatent:
    def test_recovers_principal_subspace(self, rng):
        basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
        scores = rng.normal(size=(30, 2)) * [5.0, 2.0]
        X = scores @ basis.T
        Q = msgp.init_latent(X, None, 2, seed=0, jitter=0.0)
        Xs = standardize_apply(standardize_fit(X), X)
        U = np.linalg.svd(Xs, full_matrices=False)[0][:, :2]
        assert np.max(subspace_angles(Q, U)) <= 1e-6

    def test_constant_data(self, caplog):
        with caplog.at_level(logging.WARNING, logger="glucoctx.msgp"):
            Q = msgp.init_latent(np.full((10, 3), 7.0), None, 2, seed=1)
        assert np.max(np.abs(Q)) <= 1e-3
        assert "zero variance" in caplog.text

    def test_deterministic(self, rng):
        V, S = rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
        assert msgp.init_latent(V, S, 3, seed=5).tobytes() == msgp.init_latent(V, S, 3, seed=5).tobytes()

    def test_dimension_cap(self, rng):
        with pytest.raises(InputShapeError):
            msgp.init_latent(rng.normal(size=(10, 2)), rng.normal(size=(10, 1)), 4, seed=0)


class TestTrainConfig:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            msgp.TrainConfig(context_mode="late_fusion")

    def test_latent_cap_enforced_in_train(self):
        V, S, y = two_view_data(0, n=5)
        with pytest.raises(InputShapeError):
            msgp.train(V, S, y, msgp.TrainConfig(latent_dim=5, **FAST))


@pytest.fixture(scope="module")
def shared_model():
    V, S, y = two_view_data(0)
    return msgp.train(V, S, y, msgp.TrainConfig(latent_dim=2, seed=0, **FAST)), (V, S, y)


class TestTrain:
    def test_descends_from_init(self):
        for seed in range(10):
            V, S, y = two_view_data(seed, n=25)
            model = msgp.train(V, S, y, msgp.TrainConfig(latent_dim=2, seed=seed, max_iters=15,
                                                          head_restarts=1, head_max_iters=10))
            trace = model.objective_trace
            assert trace[-1] < trace[0]
            assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_stored_objective_recomputes(self, shared_model):
        model, _ = shared_model
        assert abs(model.recompute_objective() - model.objective_value) <= 1e-9

    def test_shapes(self, shared_model):
        model, (V, S, _) = shared_model
        assert model.Q.shape == (V.shape[0], 2)
        assert model.V_ref.shape == V.shape and model.S_ref.shape == S.shape
        assert len(model.head_cls) == 3

    def test_deterministic(self, shared_model):
        model, (V, S, y) = shared_model
        again = msgp.train(V, S, y, model.config)
        assert np.max(np.abs(again.Q - model.Q)) <= 1e-12

    def test_reduction_to_single_view(self):
        V, S, y = two_view_data(4, n=15)
        cfg = msgp.TrainConfig(latent_dim=2, seed=4, context_mode="none", max_iters=25,
                               head_restarts=1, head_max_iters=5)
        model = msgp.train(V, S, y, cfg)
        Vs = standardize_apply(standardize_fit(V), V)
        Q0 = msgp.init_latent(Vs, None, 2, 4)
        from glucoctx.kernels import median_inv_lengthscale
        x0 = np.concatenate([Q0.ravel(), [0.0, np.log(median_inv_lengthscale(Q0))]])
        fg = lambda x: single_view_gplvm(x, 15, 2, Vs, cfg.jitter)
        _, f_ref, _ = scg_minimize(lambda x: fg(x)[0], lambda x: fg(x)[1], x0,
                                   ScgConfig(max_iters=cfg.max_iters, rel_tol=cfg.rel_tol))
        assert abs(model.objective_value - f_ref) <= 1e-6

    def test_early_fusion_is_single_view(self, shared_model):
        _, (V, S, y) = shared_model
        model = msgp.train(V, S, y, msgp.TrainConfig(latent_dim=2, context_mode="early_fusion", **FAST))
        assert model.params_s is None
        assert model.V_ref.shape[1] == V.shape[1] + S.shape[1]

    def test_context_mode_needs_context(self):
        V, _, y = two_view_data(0, n=10)
        with pytest.raises(InputShapeError):
            msgp.train(V, None, y, msgp.TrainConfig(latent_dim=2, context_mode="shared_latent", **FAST))


class TestInferLatent:
    def test_training_point_is_recovered(self, shared_model):
        model, (V, S, _) = shared_model
        for i in (0, 7, 23):
            q = msgp.infer_latent(model, V[i], S[i])
            assert np.max(np.abs(q - model.Q[i])) <= 1e-4

    def test_context_placeholder_ignored_without_context_view(self):
        V, S, y = two_view_data(1, n=25)
        model = msgp.train(V, S, y, msgp.TrainConfig(latent_dim=2, context_mode="none", **FAST))
        v = V[3] + 1.0
        a = msgp.infer_latent(model, v, None)
        b = msgp.infer_latent(model, v, np.array([99.0, -3.0]))
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_single(self, shared_model):
        model, (V, S, _) = shared_model
        Vn, Sn = V[:5] + 1.5, S[:5] * 1.1
        batch = msgp.infer_latents(model, Vn, Sn)
        for i in range(5):
            np.testing.assert_allclose(batch[i], msgp.infer_latent(model, Vn[i], Sn[i]), atol=1e-12)

    def test_midpoint_stays_between_neighbours(self):
        hits = 0
        for seed in range(10):
            V, S, y = two_view_data(seed, n=30, noise=0.5)
            cfg = msgp.TrainConfig(latent_dim=1, seed=seed, context_mode="none", max_iters=100,
                                   head_restarts=1, head_max_iters=20)
            model = msgp.train(V, S, y, cfg)
            D = ((V[:, None, :] - V[None, :, :]) ** 2).sum(-1)
            np.fill_diagonal(D, np.inf)
            i, j = np.unravel_index(np.argmin(D), D.shape)
            q = msgp.infer_latent(model, 0.5 * (V[i] + V[j]))
            lo = np.minimum(model.Q[i], model.Q[j])
            hi = np.maximum(model.Q[i], model.Q[j])
            pad = 0.1 * (hi - lo)
            hits += bool(np.all((q >= lo - pad) & (q <= hi + pad)))
        assert hits >= 9

    def test_wrong_window_length(self, shared_model):
        model, _ = shared_model
        with pytest.raises(InputShapeError):
            msgp.infer_latent(model, np.zeros(3))


class TestLabels:
    def test_argmax(self):
        assert msgp.argmax_label([0.2, 0.5, 0.3]) == GlycemicLabel.EU

    def test_tie_prefers_hypo(self):
        assert msgp.argmax_label([0.4, 0.2, 0.4]) == GlycemicLabel.HYPO

    def test_tie_prefers_hyper_over_eu(self):
        assert msgp.argmax_label([0.1, 0.45, 0.45]) == GlycemicLabel.HYPER

    def test_argmax_invariant_to_common_scaling(self, rng):
        from glucoctx.gp import squash
        for _ in range(100):
            f = rng.normal(size=3)
            c = rng.uniform(0.1, 10)
            p1, p2 = squash(f), squash(c * f)
            assert msgp.argmax_label(p1 / p1.sum()) == msgp.argmax_label(p2 / p2.sum())

    def test_probabilities_normalized(self, shared_model):
        model, (V, S, _) = shared_model
        _, probs = msgp.predict_labels(model, V[:10], S[:10])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((probs > 0) & (probs < 1))

    def test_separable_classes(self):
        r = np.random.default_rng(0)
        levels = np.array([50.0, 120.0, 260.0])
        cls = r.integers(0, 3, size=150)
        V = levels[cls][:, None] + r.normal(scale=5.0, size=(150, 4))
        y = levels[cls] + r.normal(scale=5.0, size=150)
        model = msgp.train(V[:90], None, y[:90], msgp.TrainConfig(latent_dim=2, context_mode="none", **FAST))
        labels, _ = msgp.predict_labels(model, V[90:])
        assert np.mean(labels == cls[90:]) >= 0.95

    def test_single_label(self, shared_model):
        model, (V, S, _) = shared_model
        label, probs = msgp.predict_label(model, V[0], S[0])
        assert isinstance(label, GlycemicLabel) and probs.shape == (3,)


class TestForecast:
    def test_one_step_is_head_prediction(self, shared_model):
        model, (V, S, _) = shared_model
        (mean, var), = msgp.recursive_forecast(model, V[5], S[5], 1)
        m_ref, v_ref = msgp.predict_values(model, V[5:6], S[5:6])
        assert mean == m_ref[0] and var == v_ref[0]

    @pytest.mark.parametrize("h", [1, 6, 12])
    def test_length(self, shared_model, h):
        model, (V, S, _) = shared_model
        assert len(msgp.recursive_forecast(model, V[2], S[2], h)) == h

    def test_constant_series(self):
        c = 140.0
        V = np.full((30, 6), c)
        model = msgp.train(V, None, np.full(30, c), msgp.TrainConfig(latent_dim=2, context_mode="none", **FAST))
        for mean, var in msgp.recursive_forecast(model, V[0], None, 6):
            assert abs(mean - c) <= 0.05 * c

    def test_horizon_validated(self, shared_model):
        model, (V, S, _) = shared_model
        with pytest.raises(ValueError):
            msgp.recursive_forecast(model, V[0], S[0], 0)


class TestSerialization:
    def test_round_trip_predictions_bitwise(self, shared_model, tmp_path):
        model, (V, S, _) = shared_model
        path = tmp_path / "model.npz"
        msgp.save_model(model, path, provenance={"run": "x"})
        loaded = msgp.load_model(path)
        a = msgp.predict_labels(model, V + 0.5, S)
        b = msgp.predict_labels(loaded, V + 0.5, S)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        m1 = msgp.predict_values(model, V, S)
        m2 = msgp.predict_values(loaded, V, S)
        assert m1[0].tobytes() == m2[0].tobytes() and m1[1].tobytes() == m2[1].tobytes()
        assert loaded.config == model.config and loaded.objective_value == model.objective_value
        assert loaded.provenance == {"run": "x"}

    def test_rejects_other_versions(self, shared_model, tmp_path, monkeypatch):
        model, _ = shared_model
        path = tmp_path / "model.npz"
        monkeypatch.setattr(msgp, "FORMAT_VERSION", 99)
        msgp.save_model(model, path)
        monkeypatch.setattr(msgp, "FORMAT_VERSION", 1)
        with pytest.raises(ValueError):
            msgp.load_model(path)


class TestEstimator:
    def test_fit_predict(self):
        V, S, y = two_view_data(2)
        est = msgp.MultiSignalGP(latent_dim=2, max_iters=30).fit(V, y, S=S)
        assert est.predict(V[:4], S[:4]).shape == (4,)
        assert est.predict_proba(V[:4], S[:4]).shape == (4, 3)
        assert est.transform(V[:4], S[:4]).shape == (4, 2)
        means, variances = est.forecast(V[:4], S[:4], horizon=3)
        assert means.shape == variances.shape == (4, 3)
        assert est.predict_value(V[:4], S[:4]).shape == (4,)

    def test_clone(self):
        est = msgp.MultiSignalGP(latent_dim=3, context_mode="none")
        assert clone(est).get_params()["context_mode"] == "none"
