import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from conftest import FAST_OPTIONS, manual_prepared
from qope.core import ConfigError, Dataset, RngStream, ThresholdPolicy
from qope.inference import (
    J0_FLOOR,
    KernelSpec,
    j0_dm,
    j0_dr,
    j0_ipw,
    kde,
    psi_values,
    quantile_inference,
    sandwich_variance,
    scott_bandwidth,
    wald_ci,
)
from qope.quantile import EstimatorConfig, NuisanceOptions, point_estimate, prepare
from qope.simbench import DgpSpec, behavior_policy, generate, oracle_law, reward_oracles, target_policy


def test_kde_integrates_to_one():
    pts = np.random.default_rng(0).standard_t(3, size=200)
    total, _ = integrate.quad(lambda e: kde(pts, e, 0.15).mean(), -60, 60, limit=500, points=[0.0])
    assert total == pytest.approx(1.0, abs=1e-6)


def test_scott_bandwidth_formula():
    x = np.random.default_rng(1).normal(size=1000)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert scott_bandwidth(x) == pytest.approx(1.059 * min(sd, iqr / 1.349) * 1000 ** -0.2)
    assert KernelSpec(rule="scott").resolve(x) == scott_bandwidth(x)
    with pytest.raises(ConfigError):
        KernelSpec(0.0)


def test_wald_interval_example():
    lo, hi = wald_ci(1.0, 4.0, 100, 0.05)
    half = norm.ppf(0.975) * 0.2
    assert (lo, hi) == pytest.approx((1.0 - half, 1.0 + half))


def test_sandwich_variance_averages_folds():
    assert sandwich_variance([np.array([1.0, -1.0]), np.array([2.0])], 0.5) == pytest.approx(2.5 / 0.25)
    with pytest.raises(ConfigError):
        sandwich_variance([np.ones(2)], 0.0)


def test_psi_on_toy_matches_definition():
    prep = manual_prepared(outcome=[1.0, 3.0], ratios=[[2.0], [0.5]], prefix=[[0.0], [0.0]],
                           rollouts=[[[0.0, 2.0], [4.0, 5.0]]], rollout_weights=[[[0.5, 0.5]] * 2])
    eta, tau = 2.5, 0.3
    expected = [
        2.0 * (1 - tau) + (1 - 2.0) * 0.5 * ((1 - tau) + (1 - tau)),
        0.5 * (0 - tau) + (1 - 0.5) * 0.5 * ((0 - tau) + (0 - tau)),
    ]
    np.testing.assert_allclose(psi_values(prep, eta, tau), expected)


@pytest.fixture(scope="module")
def collapse_prepared():
    """Behavior equals target: every importance ratio is one."""
    gen = np.random.default_rng(3)
    x = gen.normal(size=(3000, 1))
    ds = Dataset((x,), (x[:, 0] > 0).astype(int), gen.normal(size=3000), 2)
    opts = NuisanceOptions(propensity=ThresholdPolicy(), mdn=FAST_OPTIONS.mdn)
    return prepare(ds, ThresholdPolicy(), EstimatorConfig(mc_samples=5), opts, RngStream(0))


def test_psi_changes_sign_at_estimate(collapse_prepared):
    prep = collapse_prepared
    for tau in (0.2, 0.5, 0.9):
        eta = point_estimate(prep, tau)[0]
        z = np.sort(prep.points("dr")[0])
        above = z[np.searchsorted(z, eta, side="right")]
        assert psi_values(prep, eta, tau).sum() <= 1e-9
        assert psi_values(prep, (eta + above) / 2, tau).sum() >= -1e-9


def test_collapse_density_and_variance(collapse_prepared):
    prep = collapse_prepared
    eta = point_estimate(prep, 0.5)[0]
    y = prep.dataset.cumulative_rewards()
    plain = np.mean(norm.pdf((y - eta) / 0.15) / 0.15)
    assert j0_ipw(prep, eta) == pytest.approx(plain)
    assert j0_dr(prep, eta) == pytest.approx(plain)
    psi = psi_values(prep, eta, 0.5)
    assert np.mean(psi ** 2) == pytest.approx(0.25, abs=1e-9)


def test_direct_density_with_true_models():
    spec = DgpSpec("single", 3.0, 3000)
    ds = generate(spec, RngStream(8))
    opts = NuisanceOptions(propensity=behavior_policy(spec), outcome=reward_oracles(spec))
    prep = prepare(ds, target_policy(), EstimatorConfig(mc_samples=20), opts, RngStream(1))
    law = oracle_law("single", 3.0)
    q = float(law.quantile(0.5))
    assert j0_dm(prep, q) == pytest.approx(float(law.density(q)[0]), rel=0.1)


def test_inference_floors_density():
    prep = manual_prepared(outcome=[1.0, 3.0], ratios=[[1.0], [1.0]], prefix=[[0.0], [0.0]],
                           rollouts=[[[1.0], [3.0]]], rollout_weights=[[[1.0]] * 2])
    res = quantile_inference(prep, 0.5, 1e3, method="ipw")
    assert res.diagnostics["unstable"]
    assert res.j0 == J0_FLOOR
    assert math.isfinite(res.sigma2)


def test_few_aligned_rows_fall_back_to_rollouts():
    spec = DgpSpec("two", 4.0, 60)
    ds = generate(spec, RngStream(2))
    prep = prepare(ds, target_policy(), EstimatorConfig(mc_samples=5), FAST_OPTIONS, RngStream(3))
    eta = point_estimate(prep, 0.5)[0]
    with pytest.warns(UserWarning, match="aligned rows"):
        res = quantile_inference(prep, 0.5, eta)
    assert res.j0 > 0 and res.ci[0] < eta < res.ci[1]


def test_two_stage_inference_runs():
    spec = DgpSpec("two", 4.0, 600)
    ds = generate(spec, RngStream(4))
    prep = prepare(ds, target_policy(), EstimatorConfig(mc_samples=10), FAST_OPTIONS, RngStream(5))
    eta, fold_etas, _ = point_estimate(prep, 0.5)
    res = quantile_inference(prep, 0.5, eta, fold_etas)
    assert res.j0_dr > 0
    assert math.isnan(res.j0_dm)
    assert res.ci[0] < eta < res.ci[1]
