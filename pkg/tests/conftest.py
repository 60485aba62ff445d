import numpy as np
import pytest

from thresholdcurves import simlab


@pytest.fixture(scope="session")
def ref_cfg():
    return simlab.reference_scenario(n=2_000, seed=11)


@pytest.fixture(scope="session")
def ref_data(ref_cfg):
    return simlab.simulate_dataset(ref_cfg)


@pytest.fixture(scope="session")
def ref_fit(ref_cfg, ref_data):
    """One converged small fit shared by the estimator-level tests."""
    from thresholdcurves import emfit

    ds, _ = ref_data
    controls = emfit.FitControls(max_iter=300, rel_tol=1e-9, n_starts=2, seed=5)
    return emfit.fit(ds, controls=controls)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
