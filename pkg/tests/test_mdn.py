import numpy as np
import pytest
from scipy import integrate, stats

from qope.core import ConfigError, ContractError
from qope.mdn import (
    MdnConfig,
    MdnModel,
    constant_mixture,
    fit_mdn,
    lr_schedule,
    mc_expected_pinball,
    mdn_cdf,
    mdn_pdf,
    mdn_sample,
    robust_center_scale,
)

PHI0 = 1 / np.sqrt(2 * np.pi)  # standard normal density at 0


@pytest.fixture(scope="module")
def normal_fit():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(4000, 1))
    y = gen.normal(size=4000)
    return fit_mdn(x, y, MdnConfig(components=4, epochs=60), gen)


@pytest.fixture(scope="module")
def conditional_fit():
    gen = np.random.default_rng(1)
    x = gen.uniform(-1, 1, size=(5000, 1))
    y = 2 * x[:, 0] + 0.5 * gen.normal(size=5000)
    return fit_mdn(x, y, MdnConfig(components=3, epochs=80), gen)


def test_standard_normal_density(normal_fit):
    assert abs(mdn_pdf(normal_fit, [0.0], 0.0) - PHI0) < 0.05


def test_pdf_integrates_to_one(conditional_fit):
    for x in (-0.8, 0.0, 0.6):
        total, _ = integrate.quad(lambda r: mdn_pdf(conditional_fit, [x], r), -10, 10, limit=200)
        assert total == pytest.approx(1.0, abs=1e-3)


def test_cdf_matches_pdf(conditional_fit):
    a, b = -0.5, 1.3
    mass, _ = integrate.quad(lambda r: mdn_pdf(conditional_fit, [0.3], r), a, b)
    assert mdn_cdf(conditional_fit, [0.3], b) - mdn_cdf(conditional_fit, [0.3], a) == pytest.approx(mass, abs=1e-8)


def test_conditional_location_tracks_features(conditional_fit):
    means = conditional_fit.mean(np.array([[-0.5], [0.5]]))
    np.testing.assert_allclose(means, [-1.0, 1.0], atol=0.1)


def test_sampler_matches_cdf(conditional_fit):
    gen = np.random.default_rng(5)
    draws = mdn_sample(conditional_fit, [0.2], 20000, gen)
    ks = stats.kstest(draws, lambda r: conditional_fit.cdf(np.full((np.size(r), 1), 0.2), np.atleast_1d(r))).statistic
    assert ks < 0.02


def test_constant_targets_collapse():
    gen = np.random.default_rng(2)
    x = gen.normal(size=(500, 1))
    model = fit_mdn(x, np.full(500, 3.0), MdnConfig(components=2, epochs=30), gen)
    alpha, mu, sigma = model.mixture(np.array([[0.0]]))
    dominant = int(np.argmax(alpha[0]))
    assert abs(mu[0, dominant] - 3.0) < 0.01
    # the scale cannot shrink below the floor (standardized units)
    assert sigma.min() >= model.sigma_floor * model.y_scale * (1 - 1e-12)


def test_two_clusters_balanced():
    gen = np.random.default_rng(3)
    y = np.where(gen.random(6000) < 0.5, -2.0, 2.0) + 0.3 * gen.normal(size=6000)
    x = gen.normal(size=(6000, 1))
    model = fit_mdn(x, y, MdnConfig(components=2, epochs=60), gen)
    alpha, mu, _ = model.mixture(np.array([[0.0]]))
    assert np.all((alpha[0] > 0.4) & (alpha[0] < 0.6))
    np.testing.assert_allclose(np.sort(mu[0]), [-2.0, 2.0], atol=0.15)


def test_mc_expected_pinball_standard_normal():
    model = constant_mixture([1.0], [0.0], [1.0])
    val = mc_expected_pinball(model, [0.0], 0.0, 0.5, M=100000, rng=np.random.default_rng(0))
    # E[rho_0.5(Z)] = E|Z| / 2
    assert val == pytest.approx(PHI0, abs=0.01)


def test_mc_expected_pinball_cached_draws():
    draws = np.array([-1.0, 0.0, 2.0, 3.0])
    expected = np.mean([1.0 * 0.75, 0.0, 2 * 0.25, 3 * 0.25])
    assert mc_expected_pinball(draws, None, 0.0, 0.25) == pytest.approx(expected)


def test_save_load_round_trip(tmp_path, conditional_fit):
    path = tmp_path / "m.txt"
    conditional_fit.save(path)
    back = MdnModel.load(path)
    X = np.linspace(-1, 1, 7)[:, None]
    np.testing.assert_array_equal(back.pdf(X, np.zeros(7)), conditional_fit.pdf(X, np.zeros(7)))


def test_shifted_moves_means(conditional_fit):
    X = np.array([[0.1]])
    np.testing.assert_allclose(conditional_fit.shifted(1.0).mean(X), conditional_fit.mean(X) + 1.0)


def test_training_is_seed_deterministic():
    gen_data = np.random.default_rng(9)
    x = gen_data.normal(size=(300, 2))
    y = x[:, 0] + gen_data.normal(size=300)
    cfg = MdnConfig(epochs=10)
    a = fit_mdn(x, y, cfg, np.random.default_rng(4))
    b = fit_mdn(x, y, cfg, np.random.default_rng(4))
    np.testing.assert_array_equal(a.theta, b.theta)


def test_robust_standardization_ignores_outliers():
    y = np.concatenate([np.random.default_rng(0).normal(size=999), [1e6]])
    center, scale = robust_center_scale(y)
    assert abs(center) < 0.1
    assert 0.9 < scale < 1.1


def test_feature_dimension_checked(conditional_fit):
    with pytest.raises(ContractError):
        conditional_fit.pdf(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ConfigError):
        fit_mdn(np.zeros((2, 1)), np.zeros(2), MdnConfig(components=4))


def test_lr_schedule_decays_from_rate_to_floor():
    cfg = MdnConfig(epochs=50, learning_rate=0.02, final_lr_fraction=0.1)
    rate = lr_schedule(cfg)
    assert rate[0] == pytest.approx(0.02) and rate[-1] == pytest.approx(0.002)
    assert np.all(np.diff(rate) <= 0)
    assert np.all(lr_schedule(MdnConfig(final_lr_fraction=1.0)) == 1e-2)
    with pytest.raises(ConfigError):
        MdnConfig(final_lr_fraction=0.0)
