"""EM mechanics: E/M steps, monotonicity, information, delta method."""

import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import log_expit

from thresholdcurves import emfit, latentmodel, simlab
from thresholdcurves.errors import SeparationWarning


class TestEStep:
    def test_degenerate_prior(self, ref_data, ref_cfg):
        # prior log-odds far beyond any data evidence: posterior rounds to 1
        ds, _ = ref_data
        params = replace(ref_cfg.params, eta_h=np.array([300.0, 0.0, 0.0, 0.0]))
        w = emfit.e_step(params, ds).w
        assert np.all(w == 1.0)

    def test_identical_rows_identical_weights(self, ref_data, ref_cfg):
        ds, _ = ref_data
        i = 7
        dup = replace(
            ds,
            x=np.vstack([ds.x[i], ds.x[i]]),
            z=np.vstack([ds.z[i], ds.z[i]]),
            t=np.array([ds.t[i], ds.t[i]]),
            a=np.array([ds.a[i], ds.a[i]], dtype=np.int8),
            y=np.array([ds.y[i], ds.y[i]], dtype=np.int8),
        )
        w = emfit.e_step(ref_cfg.params, dup).w
        assert w[0] == w[1]

    def test_separated_classes_recover_truth(self):
        # crank up class separation: strong drifts and strong proxy signal
        cfg = simlab.reference_scenario(n=3000, seed=3)
        params = replace(
            cfg.params,
            delta=np.array([0.8, 0.8]),
            z_models=(
                replace(cfg.params.z_models[0], coef=np.array([-1.4, 0.3, 0.0, 0.2, 2.8])),
                replace(cfg.params.z_models[1], coef=np.array([0.2, -0.3, 0.4, 0.0, 2.2])),
            ),
        )
        cfg = replace(cfg, params=params)
        ds, truth = simlab.simulate_dataset(cfg)
        w = emfit.e_step(cfg.params, ds).w
        assert np.mean(np.abs(w - truth.h)) < 0.05


class TestMStep:
    def test_fixed_point_of_em(self):
        cfg = simlab.reference_scenario(n=800, seed=21)
        ds, _ = simlab.simulate_dataset(cfg)
        controls = emfit.FitControls(max_iter=3000, rel_tol=1e-13, n_starts=1, seed=0)
        res = emfit.fit(ds, controls=controls, compute_information=False)
        w = emfit.e_step(res.params, ds)
        after = emfit.m_step(res.params, ds, w, controls)
        move = np.max(np.abs(after.flatten() - res.params.flatten()))
        assert move < 1e-5

    def test_all_ones_weights_trigger_ridge(self, ref_data, ref_cfg):
        ds, _ = ref_data
        w = emfit.PosteriorWeights(np.ones(ds.n))
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            out = emfit.m_step(ref_cfg.params, ds, w)
        assert any(isinstance(r.message, SeparationWarning) for r in rec)
        # prior pushed to the boundary
        h_prior = 1.0 / (1.0 + np.exp(-out.eta_h[0]))
        assert h_prior > 0.99

    def test_single_sweep_increases_loglik(self):
        cfg = simlab.reference_scenario(n=1500, seed=9)
        ds, _ = simlab.simulate_dataset(cfg)
        rng = np.random.default_rng(2)
        perturbed = cfg.params.with_flat(
            cfg.params.flatten() + 0.15 * rng.standard_normal(cfg.params.n_params)
        )
        before = latentmodel.observed_loglik(perturbed, ds)
        stepped = emfit.m_step(perturbed, ds, emfit.e_step(perturbed, ds))
        after = latentmodel.observed_loglik(stepped, ds)
        assert after > before


class TestFit:
    def test_trace_monotone(self, ref_fit):
        diffs = np.diff(ref_fit.loglik_trace)
        assert diffs.size == 0 or diffs.min() >= -1e-8

    def test_refit_from_converged_is_idempotent(self, ref_fit, ref_data):
        ds, _ = ref_data
        controls = emfit.FitControls(max_iter=50, rel_tol=1e-9)
        again = emfit.fit(ds, init=ref_fit.params, controls=controls,
                          compute_information=False)
        assert again.iterations <= 2

    def test_fixed_seed_bit_identical(self):
        cfg = simlab.reference_scenario(n=600, seed=13)
        ds, _ = simlab.simulate_dataset(cfg)
        controls = emfit.FitControls(max_iter=40, rel_tol=1e-8, n_starts=2, seed=99)
        f1 = emfit.fit(ds, controls=controls, compute_information=False)
        f2 = emfit.fit(ds, controls=controls, compute_information=False)
        np.testing.assert_array_equal(f1.params.flatten(), f2.params.flatten())
        np.testing.assert_array_equal(f1.loglik_trace, f2.loglik_trace)

    def test_result_json_round_trip(self, ref_fit, ref_cfg, tmp_path):
        schema = ref_cfg.schema()
        path = tmp_path / "fit.json"
        ref_fit.save(path, schema)
        back = emfit.FitResult.load(path, schema)
        np.testing.assert_allclose(back.params.flatten(), ref_fit.params.flatten(), atol=0)
        np.testing.assert_allclose(back.info, ref_fit.info, atol=0)
        assert back.converged == ref_fit.converged


class TestWeightedSolvers:
    def test_logistic_matches_independent_optimizer(self, rng):
        n = 400
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = (rng.random(n) < 0.3 + 0.4 * (X[:, 1] > 0)).astype(float)
        w = rng.uniform(0.2, 2.0, n)
        coef, flagged = emfit.weighted_logistic(X, y, w)
        assert not flagged

        def negll(beta):
            u = X @ beta
            return -float(w @ (y * log_expit(u) + (1.0 - y) * log_expit(-u)))

        res = minimize(negll, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        np.testing.assert_allclose(coef, res.x, atol=1e-6)

    def test_wls_matches_normal_equations(self, rng):
        n = 200
        X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        beta_true = np.array([0.5, -1.0, 2.0])
        y = X @ beta_true + rng.standard_normal(n)
        w = rng.uniform(0.5, 1.5, n)
        coef, msr = emfit.weighted_least_squares(X, y, w)
        want = np.linalg.solve((X * w[:, None]).T @ X, (X * w[:, None]).T @ y)
        np.testing.assert_allclose(coef, want, atol=1e-9)
        assert msr > 0


class TestInformation:
    def test_matches_direct_observed_hessian(self):
        cfg = simlab.reference_scenario(n=500, seed=17)
        ds, _ = simlab.simulate_dataset(cfg)
        controls = emfit.FitControls(max_iter=400, rel_tol=1e-11, n_starts=1, seed=0)
        res = emfit.fit(ds, controls=controls, compute_information=False)
        info = emfit.oakes_information(res.params, ds)

        vec = res.params.flatten()
        q = vec.size
        steps = 1e-4 * np.maximum(1.0, np.abs(vec))
        hess = np.empty((q, q))
        for j in range(q):
            vp, vm = vec.copy(), vec.copy()
            vp[j] += steps[j]
            vm[j] -= steps[j]
            gp = latentmodel.observed_score(res.params.with_flat(vp), ds)
            gm = latentmodel.observed_score(res.params.with_flat(vm), ds)
            hess[:, j] = (gp - gm) / (2.0 * steps[j])
        direct = -0.5 * (hess + hess.T)
        rel = np.linalg.norm(info - direct) / np.linalg.norm(direct)
        assert rel < 1e-3

    def test_symmetric(self, ref_fit):
        assert np.array_equal(ref_fit.info, ref_fit.info.T)

    def test_duplicated_dataset_doubles_information(self):
        cfg = simlab.reference_scenario(n=300, seed=29)
        ds, _ = simlab.simulate_dataset(cfg)
        doubled = replace(
            ds,
            x=np.vstack([ds.x, ds.x]),
            z=np.vstack([ds.z, ds.z]),
            t=np.concatenate([ds.t, ds.t]),
            a=np.concatenate([ds.a, ds.a]),
            y=np.concatenate([ds.y, ds.y]),
        )
        info1 = emfit.oakes_information(cfg.params, ds)
        info2 = emfit.oakes_information(cfg.params, doubled)
        np.testing.assert_allclose(info2, 2.0 * info1, rtol=5e-6, atol=1e-7)


class TestDeltaMethod:
    def test_identity_functional_reproduces_se(self, ref_fit):
        j = 3
        est, lo, hi = emfit.delta_ci(ref_fit, lambda p: p.flatten()[j])
        assert est == pytest.approx(ref_fit.params.flatten()[j])
        half = 1.959963984540054 * ref_fit.se[j]
        assert hi - est == pytest.approx(half, rel=1e-5)
        assert est - lo == pytest.approx(half, rel=1e-5)

    def test_linear_functional_scales_width(self, ref_fit):
        j = 3
        _, lo1, hi1 = emfit.delta_ci(ref_fit, lambda p: p.flatten()[j])
        _, lo2, hi2 = emfit.delta_ci(ref_fit, lambda p: 2.0 * p.flatten()[j])
        assert hi2 - lo2 == pytest.approx(2.0 * (hi1 - lo1), rel=1e-6)
