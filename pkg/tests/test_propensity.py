import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.stats import norm

from qope.core import ConfigError, ContractError, Dataset, RngStream, TabularPolicy
from qope.propensity import (
    GbdtConfig,
    OraclePropensity,
    PropensityModel,
    clip_probabilities,
    fit_gbdt,
    fit_propensity,
    predict_propensity,
)
from qope.simbench import DgpSpec, behavior_policy, generate


def logistic_oracle(x, a, l2=1e-3):
    """Ridge-penalized logistic regression by direct minimization."""
    X = np.column_stack([np.ones_like(x), x])

    def loss(w):
        z = X @ w
        return np.sum(np.logaddexp(0, z) - a * z) + l2 * np.dot(w, w)

    return optimize.minimize(loss, np.zeros(2), method="BFGS").x


def test_separable_design():
    x = np.random.default_rng(0).normal(size=500)
    a = (x > 0).astype(int)
    model = fit_gbdt(x[:, None], a, 2, GbdtConfig(clip_floor=0.0))
    p_gbdt = model.raw_probs(np.array([[2.0]]))[0, 1]
    w = logistic_oracle(x, a)
    p_logit = 1 / (1 + np.exp(-(w[0] + 2 * w[1])))
    assert p_logit >= 0.9
    assert p_gbdt >= 0.9


def test_symmetric_design_at_zero():
    spec = DgpSpec("single", np.inf, 4000)
    ds = generate(spec, RngStream(4))
    model = fit_propensity(ds, 1, np.arange(ds.n))
    H = np.array([[0.0]])
    assert 0.4 <= model.predict(H)[0, 1] <= 0.6


def test_oracle_propensity_is_passthrough():
    spec = DgpSpec("single", np.inf, 50)
    ds = generate(spec, RngStream(0))
    oracle = OraclePropensity(behavior_policy(spec), 1, ds.layout)
    x = ds.covariates[0][:, 0]
    np.testing.assert_allclose(oracle.probs(1, ds.history(1))[:, 1], norm.cdf(4 * x), rtol=0, atol=0)
    with pytest.raises(ContractError):
        oracle.probs(2, ds.history(1))


@settings(max_examples=60, deadline=None)
@given(raw=st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6), floor=st.floats(0.001, 0.15))
def test_clipping_keeps_simplex(raw, floor):
    p = np.array(raw)[None, :]
    if floor * p.shape[1] > 1:
        return
    q = clip_probabilities(p, floor)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    assert q.min() >= floor - 1e-12
    # entries that were already above the floor keep their order
    free = (p / p.sum())[0] > floor
    assert np.all(np.diff(q[0][free][np.argsort(p[0][free])]) >= -1e-12)


def test_clipping_two_actions():
    q = clip_probabilities(np.array([[0.001, 0.999]]), 0.01)
    np.testing.assert_allclose(q, [[0.01, 0.99]])
    with pytest.raises(ConfigError):
        clip_probabilities(np.ones((1, 3)) / 3, 0.4)


def test_training_loss_decreases():
    x = np.random.default_rng(1).normal(size=(400, 2))
    a = (x[:, 0] + 0.3 * np.random.default_rng(2).normal(size=400) > 0).astype(int)
    model = fit_gbdt(x, a, 2, GbdtConfig(rounds=30))
    assert np.all(np.diff(model.train_loss) <= 1e-12)


def test_multiclass_softmax():
    gen = np.random.default_rng(3)
    x = gen.normal(size=(900, 1))
    a = np.digitize(x[:, 0], [-0.5, 0.5])
    model = fit_gbdt(x, a, 3, GbdtConfig(rounds=40))
    p = model.predict(np.array([[-2.0], [0.0], [2.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_array_equal(np.argmax(p, axis=1), [0, 1, 2])


def test_absent_class_warns():
    x = np.random.default_rng(0).normal(size=(50, 1))
    with pytest.warns(UserWarning):
        model = fit_gbdt(x, np.zeros(50, dtype=int), 3, GbdtConfig(rounds=5))
    assert np.all(model.predict(x) >= 0.01 - 1e-12)


def test_text_round_trip():
    x = np.random.default_rng(4).normal(size=(300, 2))
    a = (x[:, 1] > 0.2).astype(int)
    model = fit_gbdt(x, a, 2, GbdtConfig(rounds=10))
    back = PropensityModel.from_text(model.to_text())
    np.testing.assert_array_equal(back.predict(x), model.predict(x))


def test_predict_propensity_single_history():
    ds = Dataset((np.array([[0.0], [1.0]]),), np.array([0, 1]), np.zeros(2), 2)
    oracle = OraclePropensity(TabularPolicy((0.3, 0.7)), 1, ds.layout)
    np.testing.assert_allclose(predict_propensity(oracle, ds.history_prefix(1, 1)), [0.3, 0.7])


def test_config_validation():
    with pytest.raises(ConfigError):
        GbdtConfig(rounds=0)
    with pytest.raises(ConfigError):
        GbdtConfig(clip_floor=0.5)
    GbdtConfig(clip_floor=0.0)
