"""GPS, lognormal-variant and no-latent comparator checks."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from thresholdcurves import comparators, emfit, latentmodel, simlab
from thresholdcurves.data import Dataset
from thresholdcurves.emfit import FitControls, weighted_logistic
from thresholdcurves.latentmodel import design_xz


def _gps_dgp(n, seed, beta, sigma, alpha, gamma):
    """Data generated from the dose-response model's own assumptions."""
    cfg = simlab.reference_scenario(n=n, seed=seed)
    rng = np.random.default_rng(seed)
    x, _, z = simlab._draw_pretreatment(cfg, rng)
    xzd = np.column_stack([np.ones(n), x, z])
    w_mean = xzd @ beta
    m = w_mean - sigma**2 / 2.0
    t = np.exp(m + sigma * rng.standard_normal(n))
    r = comparators.gps_score_density(t, w_mean, sigma)
    a = (rng.random(n) < expit(comparators._psi_design(t, r) @ alpha)).astype(np.int8)
    y = (rng.random(n) < expit(
        comparators._phi_design(a.astype(float), t, r) @ gamma)).astype(np.int8)
    return Dataset(schema=cfg.schema(), x=x, z=z, t=t, a=a, y=y), cfg


GPS_BETA = np.array([0.3, 0.2, -0.1, 0.1, 0.15, -0.1])
GPS_SIGMA = 0.5
GPS_ALPHA = np.array([0.4, -0.8, 0.15, -0.3, 0.02])
GPS_GAMMA = np.array([-1.2, 0.5, -0.05, 0.3, -0.02, 0.6, -0.2, 0.05])


class TestGps:
    def test_stage1_coverage_on_lognormal_times(self):
        hits = total = 0
        for rep in range(20):
            ds, _ = _gps_dgp(1_000, 500 + rep, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
            fit = comparators.gps_fit(ds)
            nb = GPS_BETA.size
            se = fit.se[:nb]
            cover = np.abs(fit.params.beta - GPS_BETA) <= 1.959963984540054 * se
            hits += int(cover.sum())
            total += nb
        assert hits / total >= 0.88

    def test_constant_outcome_model_gives_flat_curve(self):
        ds, _ = _gps_dgp(800, 3, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
        fit = comparators.gps_fit(ds)
        g0 = math.log(0.3 / 0.7)
        flat = replace(fit.params, gamma=np.array([g0, 0, 0, 0, 0, 0, 0, 0]))
        fake = comparators.GpsFit(params=flat, info=fit.info, se=fit.se, loglik=0.0)
        curve = comparators.gps_curve(fake, ds, [0.5, 1.0, 2.0], compute_ci=False)
        np.testing.assert_allclose(curve.estimate, 0.3, atol=1e-12)

    def test_outcome_equals_decision(self):
        ds, _ = _gps_dgp(800, 4, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
        fit = comparators.gps_fit(ds)
        ident = replace(fit.params, gamma=np.array([-600.0, 0, 0, 0, 0, 1200.0, 0, 0]))
        fake = comparators.GpsFit(params=ident, info=fit.info, se=fit.se, loglik=0.0)
        grid = [0.5, 1.0, 3.0]
        outc = comparators.gps_curve(fake, ds, grid, target="outcome", compute_ci=False)
        decn = comparators.gps_curve(fake, ds, grid, target="decision", compute_ci=False)
        np.testing.assert_allclose(outc.estimate, decn.estimate, atol=1e-12)

    def test_duplicated_dataset_same_estimates(self):
        ds, _ = _gps_dgp(600, 5, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
        doubled = replace(
            ds,
            x=np.vstack([ds.x, ds.x]), z=np.vstack([ds.z, ds.z]),
            t=np.concatenate([ds.t, ds.t]), a=np.concatenate([ds.a, ds.a]),
            y=np.concatenate([ds.y, ds.y]),
        )
        f1 = comparators.gps_fit(ds)
        f2 = comparators.gps_fit(doubled)
        np.testing.assert_allclose(f1.params.flatten(), f2.params.flatten(), atol=1e-7)

    def test_consistent_when_correctly_specified(self):
        # no latent confounding: the dose-response plug-in must track the truth
        ds, cfg = _gps_dgp(25_000, 6, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
        fit = comparators.gps_fit(ds)
        grid = np.array([0.5, 1.0, 2.0, 3.0])
        curve = comparators.gps_curve(fit, ds, grid)

        rng = np.random.default_rng(777)
        n_mc = 400_000
        x, _, z = simlab._draw_pretreatment(replace(cfg, n=n_mc), rng)
        xzd = np.column_stack([np.ones(n_mc), x, z])
        w_mean = xzd @ GPS_BETA
        for j, t in enumerate(grid):
            tv = np.full(n_mc, float(t))
            r = comparators.gps_score_density(tv, w_mean, GPS_SIGMA)
            a = (rng.random(n_mc) < expit(comparators._psi_design(tv, r) @ GPS_ALPHA)).astype(float)
            y = rng.random(n_mc) < expit(comparators._phi_design(a, tv, r) @ GPS_GAMMA)
            truth = y.mean()
            # both sides carry sampling error: the MC draw, the empirical
            # (x, z) average and the fitted parameters
            se = math.sqrt(truth * (1 - truth) / n_mc + 0.25 / ds.n + curve.se[j] ** 2)
            assert abs(curve.estimate[j] - truth) < 3 * se


def _lognormal_dgp(n, seed, params):
    cfg = simlab.reference_scenario(n=n, seed=seed)
    rng = np.random.default_rng(seed)
    x, h, z = simlab._draw_pretreatment(replace(cfg, n=n, params=_carrier_like(cfg, params)), rng)
    feat = np.column_stack([x, z])
    kp = feat.shape[1]
    sigma = math.exp(params.log_sigma)
    eta = feat @ params.t_coef[:kp] + params.t_coef[kp] * h + params.t_coef[kp + 1] * (1 - h)
    logt = eta + sigma**2 / 2.0 + sigma * rng.standard_normal(n)
    t = np.exp(logt)
    u = (feat @ params.nu[:kp] + params.nu[kp] * logt
         + params.nu[kp + 1] * h + params.nu[kp + 2] * (1 - h))
    a = (rng.random(n) < expit(u)).astype(np.int8)
    y = (rng.random(n) < expit(params.cell_logits)[h, a]).astype(np.int8)
    return Dataset(schema=cfg.schema(), x=x, z=z, t=t, a=a, y=y), h


def _carrier_like(cfg, ln_params):
    return replace(cfg.params, eta_h=ln_params.eta_h, z_models=ln_params.z_models)


def _ln_truth_params(cfg):
    return comparators.LognormalParams(
        eta_h=cfg.params.eta_h,
        z_models=cfg.params.z_models,
        t_coef=np.array([0.2, -0.1, 0.1, 0.15, -0.1, 0.3, 0.7]),
        log_sigma=math.log(0.6),
        nu=np.array([0.3, -0.2, 0.2, 0.1, -0.15, -0.5, 1.2, -1.0]),
        cell_logits=cfg.params.cell_logits,
    )


class TestLognormalVariant:
    def test_em_monotone_and_recovers(self):
        cfg = simlab.reference_scenario()
        truth = _ln_truth_params(cfg)
        ds, _ = _lognormal_dgp(12_000, 9, truth)
        fit = comparators.lognormal_fit(ds, controls=FitControls(max_iter=300, rel_tol=1e-9,
                                                                 n_starts=2, seed=2))
        diffs = np.diff(fit.loglik_trace)
        assert diffs.size == 0 or diffs.min() >= -1e-8
        # pooled coverage over all parameters at the usual z-quantile
        vec_t, vec_f = truth.flatten(), fit.params.flatten()
        cover = np.abs(vec_t - vec_f) <= 1.959963984540054 * fit.se
        assert cover.mean() >= 0.85

    def test_degenerate_class_reduces_to_plain_logistic(self):
        cfg = simlab.reference_scenario()
        truth = _ln_truth_params(cfg)
        # one class only, no log-time effect in the decision model
        truth = replace(
            truth,
            eta_h=np.array([-300.0, 0.0, 0.0, 0.0]),
            nu=np.array([0.3, -0.2, 0.2, 0.1, -0.15, 0.0, 1.2, -0.6]),
        )
        ds, h = _lognormal_dgp(8_000, 10, truth)
        assert h.sum() == 0
        fit = comparators.lognormal_fit(
            ds, init=truth, controls=FitControls(max_iter=200, rel_tol=1e-10),
            compute_information=False,
        )
        # class-0 decision coefficients against a plain logistic on the same design
        feat = np.column_stack([ds.x, ds.z, np.log(ds.t), np.ones(ds.n)])
        plain, _ = weighted_logistic(feat, np.asarray(ds.a, float), np.ones(ds.n))
        kp = ds.schema.k + ds.schema.p
        got = np.concatenate([fit.params.nu[:kp + 1], [fit.params.nu[kp + 2]]])
        np.testing.assert_allclose(got, plain, atol=1e-4)

    def test_curves_bounded(self):
        cfg = simlab.reference_scenario()
        truth = _ln_truth_params(cfg)
        ds, _ = _lognormal_dgp(2_000, 11, truth)
        fit = comparators.lognormal_fit(ds, controls=FitControls(max_iter=150, n_starts=1))
        for kind in ("theta", "gamma"):
            curve = comparators.lognormal_curve(fit, ds, [0.5, 1.0, 2.0], kind=kind)
            assert np.all((curve.estimate >= 0) & (curve.estimate <= 1))
            assert np.all(curve.ci_low <= curve.estimate)
            assert np.all(curve.estimate <= curve.ci_high)


class TestNoLatent:
    def test_observable_class_matches_full_model(self):
        # the proxy column reveals the class exactly, so the latent-free fit
        # and the full fit estimate the same curve
        cfg = simlab.reference_scenario(n=6_000, seed=13)
        params = replace(
            cfg.params,
            z_models=(
                replace(cfg.params.z_models[0], coef=np.array([-300.0, 0, 0, 0, 600.0])),
                cfg.params.z_models[1],
            ),
        )
        cfg = replace(cfg, params=params)
        ds, truth = simlab.simulate_dataset(cfg)
        np.testing.assert_array_equal(ds.z[:, 0], truth.h)

        grid = np.array([0.5, 1.0, 2.0, 5.0])
        nl = comparators.no_latent_variant("brownian", ds, grid)
        full = emfit.fit(ds, controls=FitControls(max_iter=200, rel_tol=1e-8, n_starts=2, seed=3))
        from thresholdcurves import effects

        full_curve = effects.theta_curve(full, ds, grid)
        se = np.sqrt(full_curve.se**2 + nl.theta.se**2) + 1e-12
        assert np.all(np.abs(full_curve.estimate - nl.theta.estimate) < 2.5 * se)

    def test_confounded_data_biases_no_latent(self):
        cfg = simlab.confounded_scenario(n=12_000, seed=17)
        ds, _ = simlab.simulate_dataset(cfg)
        grid = np.array([0.5, 1.0, 2.0, 3.0])
        nl = comparators.no_latent_variant("brownian", ds, grid)
        worst = 0.0
        for j, t in enumerate(grid):
            truth = simlab.interventional_mc(replace(cfg, n=100_000), fix_t=float(t))
            se = math.sqrt(nl.theta.se[j] ** 2 + truth.theta_se**2)
            worst = max(worst, abs(nl.theta.estimate[j] - truth.theta) / se)
        assert worst > 3.0

    def test_nesting_via_embedding(self):
        cfg = simlab.reference_scenario(n=2_500, seed=19)
        ds, _ = simlab.simulate_dataset(cfg)
        nl = comparators.no_latent_variant("brownian", ds, np.array([1.0]), compute_ci=False)
        embedded = comparators.embed_no_latent_in_full(nl.fit, ds)
        ll_embed = latentmodel.observed_loglik(embedded, ds)
        full = emfit.fit(ds, init=embedded, controls=FitControls(max_iter=150, rel_tol=1e-9),
                         compute_information=False)
        assert full.loglik >= ll_embed - 1e-6 * (1.0 + abs(ll_embed))

    def test_lognormal_no_latent_runs_and_bounds(self):
        cfg = simlab.reference_scenario(n=2_000, seed=23)
        ds, _ = simlab.simulate_dataset(cfg)
        res = comparators.no_latent_variant("lognormal", ds, np.array([0.5, 1.0, 2.0]))
        assert res.fit.model == "lognormal"
        for curve in (res.theta, res.gamma):
            assert np.all((curve.estimate >= 0) & (curve.estimate <= 1))

    def test_gps_stage1_residual_moment(self):
        # under its own model the mean squared log-time residual equals
        # sigma^2 (the location is W - sigma^2/2)
        ds, _ = _gps_dgp(30_000, 29, GPS_BETA, GPS_SIGMA, GPS_ALPHA, GPS_GAMMA)
        fit = comparators.gps_fit(ds)
        xzd = design_xz(ds.x, ds.z)
        resid = np.log(ds.t) - (xzd @ fit.params.beta - fit.params.sigma**2 / 2.0)
        assert np.mean(resid**2) == pytest.approx(fit.params.sigma**2, rel=0.05)
