"""Tilted-likelihood refits: neutrality, proper densities, grid table."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from thresholdcurves import emfit, fpt, latentmodel, sensitivity, simlab
from thresholdcurves.emfit import FitControls
from thresholdcurves.errors import ParameterDomainError
from thresholdcurves.sensitivity import PsiConfig


@pytest.fixture(scope="module")
def small_fit_setup():
    cfg = simlab.reference_scenario(n=1_200, seed=101)
    ds, _ = simlab.simulate_dataset(cfg)
    controls = FitControls(max_iter=200, rel_tol=1e-9, n_starts=2, seed=7)
    base = emfit.fit(ds, controls=controls)
    return cfg, ds, controls, base


class TestNeutralTilt:
    def test_psi_config_validation(self):
        with pytest.raises(ParameterDomainError):
            PsiConfig(0.0, 1.0)

    def test_bit_for_bit_equality(self, small_fit_setup):
        _, ds, controls, base = small_fit_setup
        tilted = sensitivity.tilted_fit(ds, PsiConfig(1.0, 1.0), controls=controls)
        np.testing.assert_array_equal(tilted.params.flatten(), base.params.flatten())
        np.testing.assert_array_equal(tilted.loglik_trace, base.loglik_trace)
        np.testing.assert_array_equal(tilted.info, base.info)

    def test_neutral_likelihood_identical(self, small_fit_setup):
        cfg, ds, _, _ = small_fit_setup
        tl = sensitivity.tilted_complete_ll(cfg.params, ds, PsiConfig(1.0, 1.0))
        ll = latentmodel.complete_loglik_matrix(cfg.params, ds)
        np.testing.assert_array_equal(tl, ll)


class TestTiltedDensity:
    def test_per_row_normalization_integrates_to_one(self, small_fit_setup):
        cfg, ds, _, _ = small_fit_setup
        psi = PsiConfig(0.95, 1.05)
        params = cfg.params
        links = latentmodel.row_links_batch(params, ds.x, ds.z)
        log_c, _, _, _, pi = sensitivity._tilt_pieces(params, ds, psi)
        for i in (0, 17, 101):
            for h in (0, 1):
                spec = fpt.FptSpec(float(links.b[i]), float(links.c[i]), links.d[h])
                total = 0.0
                for a in (0, 1):
                    mass, _ = quad(lambda t: fpt.fpt_density(spec, a, t), 0.0, 80.0,
                                   limit=200)
                    psi_a = psi.psi1 if a == 1 else psi.psi0
                    for yv in (0, 1):
                        cell = pi[h, a] if yv else 1.0 - pi[h, a]
                        total += mass * cell * (psi_a if yv else 1.0)
                total /= math.exp(log_c[i, h])
                assert total == pytest.approx(1.0, abs=1e-6)

    def test_tilted_loglik_differs_off_neutral(self, small_fit_setup):
        cfg, ds, _, _ = small_fit_setup
        base = latentmodel.observed_loglik(cfg.params, ds)
        tilted = sensitivity.tilted_observed_loglik(cfg.params, ds, PsiConfig(0.9, 1.1))
        assert tilted != base


class TestTiltedFit:
    def test_em_monotone_off_neutral(self, small_fit_setup):
        _, ds, controls, base = small_fit_setup
        res = sensitivity.tilted_fit(ds, PsiConfig(0.95, 1.05), controls=controls,
                                     init=base.params, compute_information=False)
        diffs = np.diff(res.loglik_trace)
        assert diffs.size == 0 or diffs.min() >= -1e-8
        assert res.converged

    def test_extreme_corners_stay_in_band(self, small_fit_setup):
        # tilts from the factorial grid move the outcome curve by less than
        # its own sampling band when the data came from the untilted model
        _, ds, controls, base = small_fit_setup
        from thresholdcurves.effects import gamma_curve

        t_eval = np.array([3.0])
        base_curve = gamma_curve(base, ds, t_eval)
        for psi in (PsiConfig(0.95, 1.05), PsiConfig(1.05, 0.95)):
            res = sensitivity.tilted_fit(ds, psi, controls=controls, init=base.params,
                                         compute_information=False)
            got = gamma_curve(
                emfit.FitResult(
                    params=res.params, loglik_trace=res.loglik_trace, info=base.info,
                    converged=res.converged, iterations=res.iterations, se=base.se,
                    gradient_norm=res.gradient_norm,
                ),
                ds, t_eval, compute_ci=False,
            )
            assert abs(got.estimate[0] - base_curve.estimate[0]) < 3 * base_curve.se[0]


class TestSensitivityTable:
    def test_single_neutral_cell_matches_base(self, small_fit_setup):
        _, ds, controls, base = small_fit_setup
        from thresholdcurves.effects import gamma_curve

        times = (0.5, 2.0)
        rows = sensitivity.sensitivity_table(ds, [PsiConfig(1.0, 1.0)], times=times,
                                             controls=controls)
        assert len(rows) == 2
        want = gamma_curve(base, ds, np.asarray(times))
        for j, row in enumerate(rows):
            assert row.estimate == pytest.approx(want.estimate[j], abs=1e-12)
            assert row.converged

    def test_grid_cardinality(self, small_fit_setup):
        _, ds, controls, _ = small_fit_setup
        grid = [PsiConfig(a, b) for a in (0.975, 1.025) for b in (0.975, 1.025)]
        rows = sensitivity.sensitivity_table(ds, grid, times=(1.0, 3.0), controls=controls)
        assert len(rows) == len(grid) * 2
        combos = {(r.psi0, r.psi1, r.t_hours) for r in rows}
        assert len(combos) == len(rows)

    def test_default_grid_is_factorial(self):
        grid = sensitivity.default_psi_grid()
        assert len(grid) == 25
        assert PsiConfig(1.0, 1.0) in grid
