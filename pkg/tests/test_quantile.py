import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import FAST_OPTIONS, manual_prepared
from qope.core import ConfigError, Dataset, RngStream, TabularPolicy, ThresholdPolicy
from qope.quantile import (
    EstimatorConfig,
    FoldNuisance,
    KinkSet,
    NuisanceOptions,
    dr_objective,
    estimate_Lk,
    estimate_quantiles,
    objective,
    pinball,
    point_estimate,
    prepare,
    simulate_rollouts,
    solve_kinks,
    solve_subgradient,
    solve_quantile,
)
from qope.simbench import DgpSpec, behavior_policy, generate, oracle_law, target_policy

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("u, tau, expected", [(-2.0, 0.5, 1.0), (1.0, 0.9, 0.9), (1.0, 0.1, 0.1),
                                              (-1.0, 0.9, 0.1), (0.0, 0.3, 0.0)])
def test_pinball_values(u, tau, expected):
    assert pinball(u, tau) == pytest.approx(expected)


@settings(max_examples=200, deadline=None)
@given(u=finite, tau=st.floats(0.001, 0.999))
def test_pinball_identities(u, tau):
    tol = 1e-12 * max(1.0, abs(u))
    assert abs(pinball(u, tau) + pinball(u, 1 - tau) - abs(u)) <= tol
    assert abs(pinball(u, tau) + pinball(-u, tau) - abs(u)) <= tol
    assert abs(pinball(-u, 1 - tau) - pinball(u, tau)) <= tol
    assert pinball(u, tau) >= 0


@settings(max_examples=100, deadline=None)
@given(z=st.lists(finite, min_size=1, max_size=40), tau=st.floats(0.01, 0.99), data=st.data())
def test_kink_values_match_direct_objective(z, tau, data):
    c = np.array(data.draw(st.lists(st.floats(-2, 3), min_size=len(z), max_size=len(z))))
    assume(np.any(c != 0))
    ks = KinkSet(z, c)
    direct = np.array([objective(v, ks.z, ks.c, tau) for v in ks.z])
    np.testing.assert_allclose(ks.values(tau), direct, rtol=1e-9, atol=1e-9 * ks.scale)


@settings(max_examples=200, deadline=None)
@given(y=st.lists(st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-6), min_size=1, max_size=60),
       k=st.integers(1, 99))
def test_unit_weights_give_empirical_quantile(y, k):
    tau = Fraction(k, 100)
    y = np.array(y)
    eta, _ = solve_kinks(y, np.ones_like(y), float(tau))
    rank = math.ceil(len(y) * tau)
    assert eta == np.sort(y)[rank - 1]


@pytest.mark.parametrize("seed", range(20))
def test_subgradient_matches_kink_scan(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(5, 200))
    z = gen.standard_t(2, size=n)
    c = gen.exponential(size=n)
    c[gen.random(n) < 0.2] *= -0.3  # some negative stage corrections
    assert c.sum() > 0
    tau = float(gen.uniform(0.05, 0.95))
    eta_k, f_k = solve_kinks(z, c, tau)
    eta_s, f_s, iters, converged = solve_subgradient(z, c, tau)
    assert f_s <= f_k + 1e-9 * np.sum(np.abs(c * z))
    assert iters <= 500


def test_ties_resolve_to_smallest_kink():
    # flat between 1 and 2 at tau = 0.5
    eta, _ = solve_kinks(np.array([2.0, 1.0, 3.0, 0.0]), np.ones(4), 0.5)
    assert eta == 1.0


def toy_prepared():
    """Three subjects, one stage, two cached draws each."""
    return manual_prepared(
        outcome=[1.0, 2.0, 3.0],
        ratios=[[2.0], [0.0], [0.5]],
        prefix=[[0.0], [0.0], [0.0]],
        rollouts=[[[0.5, 1.5], [2.5, 3.5], [4.0, -1.0]]],
        rollout_weights=[[[0.5, 0.5]] * 3],
    )


def toy_objective_by_hand(eta, tau, method):
    Y = [1.0, 2.0, 3.0]
    w = [2.0, 0.0, 0.5]
    draws = [[0.5, 1.5], [2.5, 3.5], [4.0, -1.0]]
    total = 0.0
    for i in range(3):
        ipw = w[i] * pinball(Y[i] - eta, tau)
        dm = sum(pinball(d - eta, tau) for d in draws[i]) / 2
        if method == "ipw":
            total += ipw
        elif method == "dm":
            total += dm
        else:
            total += ipw + (1 - w[i]) * dm
    return total / 3


@pytest.mark.parametrize("method", ["dm", "ipw", "dr"])
@pytest.mark.parametrize("eta", [-2.0, 0.7, 1.5, 2.0, 3.2])
@pytest.mark.parametrize("tau", [0.25, 0.5, 0.8])
def test_toy_objective_matches_hand_computation(method, eta, tau):
    prep = toy_prepared()
    assert dr_objective(eta, prep, tau, method) == pytest.approx(toy_objective_by_hand(eta, tau, method), abs=1e-12)


@pytest.mark.parametrize("method", ["dm", "ipw", "dr"])
def test_toy_minimizer_is_global(method):
    prep = toy_prepared()
    eta, _, _ = point_estimate(prep, 0.5, method)
    grid = np.linspace(-3, 6, 9001)
    best = min(toy_objective_by_hand(g, 0.5, method) for g in grid)
    assert toy_objective_by_hand(eta, 0.5, method) <= best + 1e-12


def test_lk_with_degenerate_rollouts():
    # observed R1 = 4, simulated remaining reward 0: rho_0.5(4 + 0 - 3) = 0.5
    prep = manual_prepared(outcome=[4.0], ratios=[[1.0, 1.0]], prefix=[[0.0, 4.0]],
                           rollouts=[[[4.0] * 4], [[0.0] * 4]], rollout_weights=[[[0.25] * 4]] * 2)
    assert estimate_Lk(prep, 0, 2, 3.0, 0.5) == pytest.approx(0.5, abs=1e-3)


def test_lk_matches_enumeration_of_cached_draws():
    draws = np.array([[-1.0, 0.5, 2.0, 4.0]])
    prep = manual_prepared(outcome=[1.0], ratios=[[1.0, 1.0]], prefix=[[0.0, 1.5]],
                           rollouts=[draws + 1.5, draws], rollout_weights=[[[0.25] * 4]] * 2)
    for eta in (-1.0, 1.0, 2.7, 6.0):
        expected = np.mean([pinball(1.5 + d - eta, 0.3) for d in draws[0]])
        assert estimate_Lk(prep, 0, 2, eta, 0.3) == pytest.approx(expected, abs=1e-14)


class ActionReward:
    """Deterministic stand-in outcome model: reward from the one-hot action."""

    def __init__(self, per_action, reward_col=None):
        self.per_action = np.asarray(per_action, dtype=float)
        self.reward_col = reward_col

    def sample(self, X, count, gen):
        a = np.argmax(X[:, -2:], axis=1)
        r = self.per_action[a]
        if self.reward_col is not None:
            r = r + X[:, self.reward_col]
        return np.repeat(r[:, None], count, axis=1)


def two_stage_toy():
    x1 = np.array([[1.0], [-1.0]])
    x2 = np.array([[-1.0], [1.0]])
    return Dataset((x1, x2), np.array([[0, 0], [1, 1]]), np.array([[5.0, 5.0], [5.0, 5.0]]), 2)


def test_rollouts_follow_policy_and_write_history():
    ds = two_stage_toy()
    # stage 1 pays 1 + a; stage 2 pays 10 a plus the simulated stage-1 reward
    outcome = (ActionReward([1.0, 2.0]), ActionReward([0.0, 10.0], reward_col=3))
    nuis = FoldNuisance(0, np.arange(2), np.arange(2), (), outcome)
    gen = np.random.default_rng(0)
    sums, weights = simulate_rollouts(ds, np.arange(2), nuis, ThresholdPolicy(), 1, 3, gen)
    np.testing.assert_array_equal(sums, [[4.0] * 3, [12.0] * 3])
    np.testing.assert_allclose(weights, 1 / 3)
    # from stage 2 on, the observed stage-1 reward stays in the history
    sums2, _ = simulate_rollouts(ds, np.arange(2), nuis, ThresholdPolicy(), 2, 2, gen)
    np.testing.assert_array_equal(sums2, [[5.0] * 2, [15.0] * 2])


def test_stochastic_first_action_is_enumerated():
    ds = Dataset((np.zeros((2, 1)),), np.array([0, 1]), np.zeros(2), 2)
    nuis = FoldNuisance(0, np.arange(2), np.arange(2), (), (ActionReward([1.0, 2.0]),))
    sums, weights = simulate_rollouts(ds, np.arange(2), nuis, TabularPolicy((0.3, 0.7)), 1, 4,
                                      np.random.default_rng(0))
    np.testing.assert_array_equal(sums[0], [1.0] * 4 + [2.0] * 4)
    np.testing.assert_allclose(weights[0], [0.3 / 4] * 4 + [0.7 / 4] * 4)
    assert weights.sum(axis=1) == pytest.approx([1.0, 1.0])


def test_dr_coefficients_sum_to_one_per_subject():
    spec = DgpSpec("two", 4.0, 300)
    ds = generate(spec, RngStream(2))
    prep = prepare(ds, target_policy(), EstimatorConfig(mc_samples=5), FAST_OPTIONS, RngStream(3))
    z, c, subj = prep.points("dr")
    np.testing.assert_allclose(np.bincount(subj, weights=c, minlength=ds.n), 1.0, atol=1e-9)


@pytest.fixture(scope="module")
def single_stage_prepared():
    spec = DgpSpec("single", 3.0, 1500)
    ds = generate(spec, RngStream(5))
    return prepare(ds, target_policy(), EstimatorConfig(), FAST_OPTIONS, RngStream(6))


def test_end_to_end_median(single_stage_prepared):
    truth = float(oracle_law("single", 3.0).quantile(0.5))
    for method in ("dm", "ipw", "dr"):
        eta, _, diag = point_estimate(single_stage_prepared, 0.5, method)
        assert abs(eta - truth) < 0.2, method
        assert diag["solver"] == "kink-scan"


def test_estimates_reuse_cached_points(single_stage_prepared):
    a = point_estimate(single_stage_prepared, 0.3)[0]
    pts = single_stage_prepared.points("dr")
    estimate_quantiles(single_stage_prepared, [0.1, 0.9], inference=False)
    assert single_stage_prepared.points("dr") is pts
    assert point_estimate(single_stage_prepared, 0.3)[0] == a


def test_quantile_estimates_monotone_in_tau(single_stage_prepared):
    etas = [point_estimate(single_stage_prepared, t)[0] for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert np.all(np.diff(etas) > 0)


def test_same_seed_is_bitwise_reproducible():
    spec = DgpSpec("single", 3.0, 400)
    ds = generate(spec, RngStream(1))
    cfg = EstimatorConfig(mc_samples=10)
    a = prepare(ds, target_policy(), cfg, FAST_OPTIONS, RngStream(9))
    b = prepare(ds, target_policy(), cfg, FAST_OPTIONS, RngStream(9))
    za, ca, _ = a.points("dr")
    zb, cb, _ = b.points("dr")
    assert za.tobytes() == zb.tobytes() and ca.tobytes() == cb.tobytes()


def test_per_fold_average_is_mean_of_fold_solutions():
    spec = DgpSpec("single", 3.0, 500)
    ds = generate(spec, RngStream(1))
    prep = prepare(ds, target_policy(), EstimatorConfig(aggregation="per-fold-average", mc_samples=10),
                   FAST_OPTIONS, RngStream(2))
    eta, fold_etas, _ = point_estimate(prep, 0.4)
    assert fold_etas.shape == (5,)
    assert eta == pytest.approx(np.mean(fold_etas))
    for s, e in enumerate(fold_etas):
        assert e == prep.kinks("dr", s).argmin(0.4)[0]


def test_subgradient_solver_path():
    spec = DgpSpec("single", 3.0, 400)
    ds = generate(spec, RngStream(1))
    base = dict(mc_samples=10)
    k = prepare(ds, target_policy(), EstimatorConfig(**base), FAST_OPTIONS, RngStream(2))
    s = prepare(ds, target_policy(), EstimatorConfig(solver="subgradient", **base), FAST_OPTIONS, RngStream(2))
    ek, _, _ = point_estimate(k, 0.5)
    es, _, diag = point_estimate(s, 0.5)
    assert diag["solver"] == "subgradient"
    assert dr_objective(es, s, 0.5) <= dr_objective(ek, k, 0.5) + 1e-9


def test_oracle_behavior_removes_propensity_fit():
    spec = DgpSpec("single", 3.0, 300)
    ds = generate(spec, RngStream(1))
    opts = NuisanceOptions(propensity=behavior_policy(spec), mdn=FAST_OPTIONS.mdn)
    est = solve_quantile(ds, target_policy(), "dr", EstimatorConfig(mc_samples=10), RngStream(0), opts)
    assert np.isfinite(est.eta_hat) and est.ci[0] < est.eta_hat < est.ci[1]


def test_regenerated_covariates_two_stage():
    spec = DgpSpec("two", 4.0, 300)
    ds = generate(spec, RngStream(1))
    cfg = EstimatorConfig(mc_samples=5, rollout_covariates="regenerate-via-mdn")
    prep = prepare(ds, target_policy(), cfg, FAST_OPTIONS, RngStream(2))
    assert len(prep.nuisances[0].covariates) == 1
    assert np.isfinite(point_estimate(prep, 0.5)[0])


@pytest.mark.parametrize("kwargs", [dict(tau=0.0), dict(tau=1.0), dict(num_folds=1), dict(solver="newton"),
                                    dict(aggregation="median"), dict(clip_floor=0.5), dict(mc_samples=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        EstimatorConfig(**kwargs)


def test_bad_method_and_tau(single_stage_prepared):
    with pytest.raises(ConfigError):
        point_estimate(single_stage_prepared, 0.5, "aipw")
    with pytest.raises(ConfigError):
        point_estimate(single_stage_prepared, 1.5)
