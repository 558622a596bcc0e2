"""Direct, importance-weighted and doubly-robust quantile estimators.

Every estimator minimizes a weighted sum of pinball losses

    f(eta) = sum_p c_p * rho_tau(z_p - eta)

over a set of *points* ``z_p`` with coefficients ``c_p``.  For subject ``i``
with importance ratios ``w_k = pi_k(A_k|H_k) / b_k(A_k|H_k)``:

* the observed cumulative reward contributes one point with coefficient
  ``W_i = prod_k w_k``;
* stage ``k`` contributes the simulated roll-outs ``prefix_ik + s_j`` (sum of
  the observed rewards before ``k`` plus the simulated remaining rewards)
  with coefficient ``c_ik * omega_j`` where
  ``c_ik = (prod_{k'<k} w_k') (1 - w_k)`` and ``omega_j`` are the roll-out
  weights (summing to one per subject and stage).

The direct method sets ``W = 0`` and ``c_i1 = 1``; the weighting estimator
sets ``c = 0``.  Because ``f`` is piecewise linear with kinks at the points,
its minimum is attained at a point and can be found exactly by one sort and
two prefix sums (:func:`solve_kinks`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    ConfigError, ContractError, Dataset, FoldAssignment, HistoryLayout, Policy, RngStream,
    as_generator, one_hot, split_folds,
)
from .mdn import MdnConfig, fit_mdn
from .propensity import GbdtConfig, OraclePropensity, fit_propensity

logger = logging.getLogger(__name__)

METHODS = ("dm", "ipw", "dr")
SOLVERS = ("auto", "kink-scan", "subgradient")
AGGREGATIONS = ("pooled", "per-fold-average")
ROLLOUT_COVARIATES = ("observed", "regenerate-via-mdn")


def pinball(u, tau):
    """Quantile loss ``u * (tau - I{u < 0})``, elementwise."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by every quantile level of one evaluation."""

    tau: float = 0.5
    num_folds: int = 5
    mc_samples: int = 50
    solver: str = "auto"
    max_iter: int = 500
    rel_tol: float = 1e-6
    clip_floor: float = 0.01
    aggregation: str = "pooled"
    rollout_covariates: str = "observed"
    kink_limit: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.num_folds < 2:
            raise ConfigError("num_folds must be >= 2")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.rollout_covariates not in ROLLOUT_COVARIATES:
            raise ConfigError(f"rollout_covariates must be one of {ROLLOUT_COVARIATES}")
        if self.max_iter < 1 or self.rel_tol <= 0:
            raise ConfigError("max_iter must be >= 1 and rel_tol > 0")
        if not 0 <= self.clip_floor < 0.5:
            raise ConfigError("clip_floor must lie in [0, 0.5)")


@dataclass(frozen=True)
class NuisanceOptions:
    """Where the behavior-policy and reward models come from.

    ``propensity`` is ``"fit"`` or a known behavior :class:`Policy`.
    ``outcome`` is ``"fit"`` or a sequence of per-stage conditional models
    taking features ``[H_k, onehot(A_k)]``.  ``outcome_shift`` moves every
    fitted component mean, which deliberately misspecifies the reward model.
    """

    propensity: object = "fit"
    outcome: object = "fit"
    gbdt: GbdtConfig = GbdtConfig()
    mdn: MdnConfig = MdnConfig()
    outcome_shift: float = 0.0


# ---------------------------------------------------------------------------
# nuisances and pseudo-outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldNuisance:
    """Models fitted on the complement of one fold."""

    fold: int
    eval_indices: np.ndarray
    train_indices: np.ndarray
    propensity: tuple
    outcome: tuple
    covariates: tuple = ()


@dataclass(frozen=True, eq=False)
class FoldTerms:
    """Per-subject ingredients of the objective for one fold.

    ``ratios[:, k-1]`` is ``w_k``, ``prefix[:, k-1]`` the observed reward sum
    before stage ``k``; ``rollouts[k-1]`` and ``rollout_weights[k-1]`` hold
    the simulated remaining-reward sums from stage ``k`` on, shape (n, L).
    """

    fold: int
    indices: np.ndarray
    outcome: np.ndarray
    ratios: np.ndarray
    prefix: np.ndarray
    rollouts: tuple
    rollout_weights: tuple

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def coefficients(self, method: str):
        """``(W, C)``: observed-point weights (n,) and stage coefficients (n, K)."""
        n, K = self.ratios.shape
        if method == "dm":
            C = np.zeros((n, K))
            C[:, 0] = 1.0
            return np.zeros(n), C
        cum = np.cumprod(self.ratios, axis=1)
        W = cum[:, -1]
        if method == "ipw":
            return W, np.zeros((n, K))
        if method == "dr":
            before = np.column_stack([np.ones(n), cum[:, :-1]])
            return W, before * (1.0 - self.ratios)
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")

    def points(self, method: str):
        """Kink values, coefficients and local subject ids, zero coefficients dropped."""
        W, C = self.coefficients(method)
        zs = [self.outcome]
        cs = [W]
        subj = [np.arange(self.n)]
        for k in range(C.shape[1]):
            if not np.any(C[:, k]):
                continue
            roll = self.rollouts[k]
            zs.append((self.prefix[:, k : k + 1] + roll).ravel())
            cs.append((C[:, k : k + 1] * self.rollout_weights[k]).ravel())
            subj.append(np.repeat(np.arange(self.n), roll.shape[1]))
        z = np.concatenate(zs)
        c = np.concatenate(cs)
        s = np.concatenate(subj)
        keep = c != 0
        return z[keep], c[keep], s[keep]


@dataclass(frozen=True, eq=False)
class Prepared:
    """Cross-fitted nuisances and pseudo-outcomes shared by every tau."""

    dataset: Dataset
    policy: Policy
    config: EstimatorConfig
    folds: FoldAssignment
    nuisances: tuple
    terms: tuple
    options: NuisanceOptions = NuisanceOptions()
    rng: RngStream | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.dataset.n

    def points(self, method: str, fold: int | None = None):
        """Points pooled over folds (``fold=None``) or of a single fold.

        Subject ids refer to dataset rows.
        """
        key = ("points", method, fold)
        if key not in self._cache:
            parts = [t for t in self.terms if fold is None or t.fold == fold]
            zs, cs, ss = [], [], []
            for t in parts:
                z, c, s = t.points(method)
                zs.append(z)
                cs.append(c)
                ss.append(t.indices[s])
            self._cache[key] = (np.concatenate(zs), np.concatenate(cs), np.concatenate(ss))
        return self._cache[key]

    def kinks(self, method: str, fold: int | None = None) -> "KinkSet":
        key = ("kinks", method, fold)
        if key not in self._cache:
            z, c, _ = self.points(method, fold)
            self._cache[key] = KinkSet(z, c)
        return self._cache[key]


def _features(hist: np.ndarray, layout: HistoryLayout, k: int, actions) -> np.ndarray:
    return np.hstack([hist[:, : layout.width(k)], one_hot(actions, layout.num_actions)])


def _behavior_model(options: NuisanceOptions, dataset: Dataset, k: int, train, config, gen_stream):
    if isinstance(options.propensity, Policy):
        return OraclePropensity(options.propensity, k, dataset.layout)
    if options.propensity != "fit":
        raise ConfigError("propensity must be 'fit' or a behavior Policy")
    gbdt = replace(options.gbdt, clip_floor=config.clip_floor)
    return fit_propensity(dataset, k, train, gbdt, gen_stream)


def _outcome_model(options: NuisanceOptions, dataset: Dataset, k: int, train, stream):
    if options.outcome != "fit":
        models = tuple(options.outcome)
        if len(models) != dataset.horizon:
            raise ConfigError("need one outcome model per stage")
        return models[k - 1]
    X = _features(dataset.history(k)[train], dataset.layout, k, dataset.actions[train, k - 1])
    model = fit_mdn(X, dataset.rewards[train, k - 1], options.mdn, stream)
    return model.shifted(options.outcome_shift) if options.outcome_shift else model


class CovariateSampler:
    """Autoregressive per-dimension models of ``X_{k+1}`` given ``H_{k+1}`` minus ``X_{k+1}``."""

    def __init__(self, models):
        self.models = tuple(models)

    def sample(self, context: np.ndarray, gen) -> np.ndarray:
        out = np.empty((context.shape[0], len(self.models)))
        feats = context
        for j, model in enumerate(self.models):
            out[:, j] = model.sample(feats, 1, gen)[:, 0]
            feats = np.hstack([feats, out[:, j : j + 1]])
        return out


def _covariate_sampler(dataset: Dataset, k: int, train, mdn: MdnConfig, stream: RngStream):
    layout = dataset.layout
    context = dataset.history(k + 1)[train][:, : layout.block_start(k + 1)]
    target = dataset.covariates[k][train]
    models = []
    for j in range(target.shape[1]):
        models.append(fit_mdn(np.hstack([context, target[:, :j]]), target[:, j], mdn, stream.child(j)))
    return CovariateSampler(models)


def fit_nuisances(dataset: Dataset, folds: FoldAssignment, config: EstimatorConfig,
                  options: NuisanceOptions, rng: RngStream) -> tuple:
    out = []
    for s in range(folds.num_folds):
        train = folds.complement(s)
        ev = folds.indices(s)
        fold_rng = rng.child("fold", s)
        props = tuple(_behavior_model(options, dataset, k, train, config, fold_rng.child("gbdt", k))
                      for k in range(1, dataset.horizon + 1))
        outs = tuple(_outcome_model(options, dataset, k, train, fold_rng.child("mdn", k))
                     for k in range(1, dataset.horizon + 1))
        covs = ()
        if config.rollout_covariates == "regenerate-via-mdn":
            covs = tuple(_covariate_sampler(dataset, k, train, options.mdn, fold_rng.child("cov", k))
                         for k in range(1, dataset.horizon))
        out.append(FoldNuisance(s, ev, train, props, outs, covs))
    return tuple(out)


def simulate_rollouts(dataset: Dataset, idx: np.ndarray, nuisance: FoldNuisance, policy: Policy,
                      k: int, M: int, gen, regenerate: bool = False):
    """Remaining-reward sums from stage ``k`` under ``policy``.

    The stage-``k`` action is enumerated over the actions ``pi_k`` can take
    (weight ``pi_k(a|H_k) / M``); later actions are drawn from the policy and
    each simulated reward is written into the history used by the next
    stage's model.  Returns ``(sums, weights)`` of shape (n, L).
    """
    layout = dataset.layout
    K = dataset.horizon
    n = idx.shape[0]
    full = dataset.history(K)[idx]
    pk = policy.probs(k, full[:, : layout.width(k)], layout)
    deterministic = np.all((pk == 0) | (pk == 1))
    if deterministic:
        acts = [np.argmax(pk, axis=1)]
        wts = [np.ones(n)]
    else:
        acts = [np.full(n, a) for a in range(layout.num_actions)]
        wts = [pk[:, a] for a in range(layout.num_actions)]
    sums, weights = [], []
    for a, wa in zip(acts, wts):
        feats = _features(full, layout, k, a)
        r = nuisance.outcome[k - 1].sample(feats, M, gen)  # (n, M)
        total = r.copy()
        if k < K:
            hist = np.repeat(full, M, axis=0)
            hist[:, layout.action_slice(k)] = np.repeat(one_hot(a, layout.num_actions), M, axis=0)
            hist[:, layout.reward_column(k)] = r.ravel()
            flat = total.ravel()
            for kk in range(k + 1, K + 1):
                if regenerate:
                    ctx = hist[:, : layout.block_start(kk)]
                    hist[:, layout.covariate_slice(kk)] = nuisance.covariates[kk - 2].sample(ctx, gen)
                ak = policy.sample(kk, hist[:, : layout.width(kk)], layout, gen)
                rk = nuisance.outcome[kk - 1].sample(_features(hist, layout, kk, ak), 1, gen)[:, 0]
                if kk < K:  # the full history ends at X_K
                    hist[:, layout.action_slice(kk)] = one_hot(ak, layout.num_actions)
                    hist[:, layout.reward_column(kk)] = rk
                flat += rk
            total = flat.reshape(n, M)
        sums.append(total)
        weights.append(np.repeat(wa[:, None] / M, M, axis=1))
    return np.hstack(sums), np.hstack(weights)


def importance_ratios(dataset: Dataset, idx: np.ndarray, nuisance: FoldNuisance, policy: Policy):
    """``pi_k(A_k|H_k) / b_k(A_k|H_k)`` for the rows ``idx``, shape (n, K)."""
    layout = dataset.layout
    out = np.empty((idx.shape[0], dataset.horizon))
    rows = np.arange(idx.shape[0])
    for k in range(1, dataset.horizon + 1):
        H = dataset.history(k)[idx]
        a = dataset.actions[idx, k - 1]
        pi = policy.probs(k, H, layout)[rows, a]
        b = nuisance.propensity[k - 1].probs(k, H, layout)[rows, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            out[:, k - 1] = np.where(pi == 0, 0.0, pi / b)
    if not np.all(np.isfinite(out)):
        raise ContractError("behavior probability zero for an action the target policy takes")
    return out


def prepare(dataset: Dataset, policy: Policy, config: EstimatorConfig = EstimatorConfig(),
            options: NuisanceOptions = NuisanceOptions(), rng=None) -> Prepared:
    """Split folds, fit nuisances on fold complements, cache pseudo-outcomes.

    The pseudo-outcomes are drawn once here and reused for every tau.
    """
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    if policy.num_actions != dataset.num_actions:
        raise ConfigError("policy and dataset disagree on the number of actions")
    folds = split_folds(dataset.n, config.num_folds, rng.child("folds"))
    nuis = fit_nuisances(dataset, folds, config, options, rng)
    regenerate = config.rollout_covariates == "regenerate-via-mdn"
    K = dataset.horizon
    cum = np.cumsum(dataset.rewards, axis=1)
    terms = []
    for fn in nuis:
        idx = fn.eval_indices
        gen = rng.child("rollout", fn.fold).generator()
        rolls, wts = [], []
        for k in range(1, K + 1):
            r, w = simulate_rollouts(dataset, idx, fn, policy, k, config.mc_samples, gen, regenerate)
            rolls.append(r)
            wts.append(w)
        prefix = np.column_stack([np.zeros(idx.shape[0]), cum[idx, :-1]])
        terms.append(FoldTerms(fn.fold, idx, cum[idx, -1], importance_ratios(dataset, idx, fn, policy),
                               prefix, tuple(rolls), tuple(wts)))
    return Prepared(dataset, policy, config, folds, nuis, tuple(terms), options, rng)


# ---------------------------------------------------------------------------
# objective and solvers
# ---------------------------------------------------------------------------


class KinkSet:
    """Sorted points with prefix sums; evaluates ``f`` at every kink in O(P)."""

    def __init__(self, z, c):
        z = np.asarray(z, dtype=float)
        c = np.asarray(c, dtype=float)
        keep = c != 0
        z, c = z[keep], c[keep]
        if z.size == 0:
            raise ContractError("objective has no kinks")
        order = np.argsort(z, kind="stable")
        self.z = z[order]
        self.c = c[order]
        cz = self.c * self.z
        self.C = np.concatenate([[0.0], np.cumsum(self.c)])
        self.D = np.concatenate([[0.0], np.cumsum(cz)])
        self.scale = float(np.sum(np.abs(self.c)) + np.sum(np.abs(cz)))

    def __len__(self):
        return self.z.shape[0]

    def values(self, tau: float) -> np.ndarray:
        """``f(z_q)`` for every sorted kink ``z_q``."""
        Cq, Dq = self.C[:-1], self.D[:-1]
        Ct, Dt = self.C[-1], self.D[-1]
        return tau * ((Dt - Dq) - self.z * (Ct - Cq)) + (1.0 - tau) * (self.z * Cq - Dq)

    def tolerance(self) -> float:
        return 1e-12 * self.scale

    def argmin(self, tau: float):
        """Minimizing kink and value; near-ties resolve to the smallest kink."""
        f = self.values(tau)
        best = f.min()
        q = int(np.flatnonzero(f <= best + self.tolerance())[0])
        return float(self.z[q]), float(f[q])


def objective(eta: float, z, c, tau: float) -> float:
    """``sum_p c_p rho_tau(z_p - eta)`` evaluated directly."""
    return float(np.dot(c, pinball(np.asarray(z) - eta, tau)))


def slope(eta: float, z, c, tau: float) -> float:
    """Right derivative of the objective at ``eta``."""
    z = np.asarray(z)
    return float(np.sum(c[z <= eta]) * (1.0 - tau) - np.sum(c[z > eta]) * tau)


def solve_kinks(z, c, tau: float):
    ks = z if isinstance(z, KinkSet) else KinkSet(z, c)
    return ks.argmin(tau)


def solve_subgradient(z, c, tau: float, max_iter: int = 500, rel_tol: float = 1e-6, starts=None):
    """Sign-step descent with step halving at every direction change.

    Runs from several starting points (the objective need not be convex
    when some coefficients are negative), keeps the best iterate, and
    finally compares the neighbouring kinks.  Returns
    ``(eta, value, iterations, converged)``.
    """
    z = np.asarray(z, dtype=float)
    c = np.asarray(c, dtype=float)
    keep = c != 0
    z, c = z[keep], c[keep]
    zs = np.sort(z)
    if starts is None:
        starts = np.quantile(zs, [tau, 0.1, 0.3, 0.5, 0.7, 0.9])
    spread = float(np.subtract(*np.quantile(zs, [0.75, 0.25])))
    step0 = spread / 2 if spread > 0 else max(1.0, float(np.abs(zs).max()))
    best_eta, best_val, total_iter, converged = None, math.inf, 0, False
    for eta in starts:
        eta = float(eta)
        step, last_sign = step0, 0.0
        local_best, local_val = eta, objective(eta, z, c, tau)
        ok = False
        for _ in range(max_iter):
            total_iter += 1
            g = slope(eta, z, c, tau)
            left = float(np.sum(c[z < eta]) * (1.0 - tau) - np.sum(c[z >= eta]) * tau)
            if left <= 0 <= g:
                ok = True
                break
            sign = 1.0 if g > 0 else -1.0
            if last_sign and sign != last_sign:
                step /= 2.0
            last_sign = sign
            new = eta - step * sign
            val = objective(new, z, c, tau)
            if val < local_val:
                local_best, local_val = new, val
            done = abs(new - eta) <= rel_tol * abs(eta) if eta != 0 else abs(new) <= rel_tol
            eta = new
            if done:
                ok = True
                break
        converged = converged or ok
        # snap to the best of the kinks bracketing the final iterate
        pos = int(np.searchsorted(zs, local_best))
        for q in range(max(pos - 2, 0), min(pos + 3, zs.shape[0])):
            val = objective(zs[q], z, c, tau)
            if val < local_val or (val == local_val and zs[q] < local_best):
                local_best, local_val = float(zs[q]), val
        if local_val < best_val or (local_val == best_val and local_best < best_eta):
            best_eta, best_val = local_best, local_val
    return best_eta, best_val, total_iter, converged


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileEstimate:
    tau: float
    eta_hat: float
    method: str
    j0_hat: float = math.nan
    sigma2_hat: float = math.nan
    ci: tuple = (math.nan, math.nan)
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.sigma2_hat) if self.sigma2_hat >= 0 else math.nan


def _solve_points(prepared: Prepared, method: str, tau: float, fold: int | None):
    cfg = prepared.config
    ks = prepared.kinks(method, fold)
    use_kinks = cfg.solver == "kink-scan" or (cfg.solver == "auto" and len(ks) <= cfg.kink_limit)
    if use_kinks:
        eta, val = ks.argmin(tau)
        return eta, val, {"solver": "kink-scan", "kinks": len(ks)}
    eta, val, iters, conv = solve_subgradient(ks.z, ks.c, tau, cfg.max_iter, cfg.rel_tol)
    return eta, val, {"solver": "subgradient", "iterations": iters, "converged": conv}


def point_estimate(prepared: Prepared, tau: float, method: str = "dr"):
    """``(eta_hat, per-fold etas or None, diagnostics)`` for one tau."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    if prepared.config.aggregation == "pooled":
        eta, val, diag = _solve_points(prepared, method, tau, None)
        diag["objective"] = val / prepared.n
        return eta, None, diag
    etas, diags = [], []
    for s in range(prepared.folds.num_folds):
        eta, val, diag = _solve_points(prepared, method, tau, s)
        etas.append(eta)
        diags.append(diag)
    return float(np.mean(etas)), np.array(etas), {"folds": diags}


def estimate_quantiles(prepared: Prepared, taus, method: str = "dr", inference: bool = True,
                       kernel=None, alpha: float = 0.05) -> list:
    """Estimates for every tau using the cached nuisances."""
    results = []
    for tau in taus:
        eta, fold_etas, diag = point_estimate(prepared, float(tau), method)
        if not inference:
            results.append(QuantileEstimate(float(tau), eta, method, diagnostics=diag))
            continue
        from .inference import quantile_inference

        inf = quantile_inference(prepared, float(tau), eta, fold_etas, method, kernel, alpha)
        diag.update(inf.diagnostics)
        results.append(QuantileEstimate(float(tau), eta, method, inf.j0, inf.sigma2, inf.ci, diag))
    return results


def solve_quantile(dataset: Dataset, target_policy: Policy, method: str = "dr",
                   config: EstimatorConfig = EstimatorConfig(), rng=None,
                   options: NuisanceOptions = NuisanceOptions(), inference: bool = True,
                   kernel=None, alpha: float = 0.05) -> QuantileEstimate:
    """Cross-fitted estimate of the ``config.tau`` quantile of the target policy's return."""
    prepared = prepare(dataset, target_policy, config, options, rng)
    return estimate_quantiles(prepared, [config.tau], method, inference, kernel, alpha)[0]


def dr_objective(eta: float, prepared: Prepared, tau: float, method: str = "dr",
                 fold: int | None = None) -> float:
    """Objective averaged over the subjects it covers."""
    z, c, _ = prepared.points(method, fold)
    n = prepared.n if fold is None else int(prepared.folds.sizes()[fold])
    return objective(eta, z, c, tau) / n


def estimate_Lk(prepared: Prepared, subject: int, k: int, eta: float, tau: float) -> float:
    """Monte-Carlo expected loss of the observed prefix plus simulated remainder."""
    s = int(prepared.folds.fold_of[subject])
    t = prepared.terms[s]
    row = int(np.flatnonzero(t.indices == subject)[0])
    vals = pinball(t.prefix[row, k - 1] + t.rollouts[k - 1][row] - eta, tau)
    return float(np.dot(t.rollout_weights[k - 1][row], vals))
