"""Standard errors and confidence intervals for the quantile estimators.

The asymptotic variance is ``E[psi^2] / J0^2`` where ``psi`` is the
per-subject derivative of the objective and ``J0`` the density of the
target return at the quantile.  ``J0`` is estimated three ways: from the
outcome models (direct), by an importance-weighted kernel density estimate
(weighting), or by combining both with the same coefficients as the point
estimator (doubly robust).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .core import ConfigError
from .mdn import fit_mdn
from .quantile import Prepared, _features

logger = logging.getLogger(__name__)

J0_FLOOR = 1e-4
MIN_ALIGNED_ROWS = 50
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gaussian_kernel(u):
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) * _INV_SQRT_2PI


def scott_bandwidth(values) -> float:
    """``1.059 * min(sd, IQR / 1.349) * n^(-1/5)``."""
    x = np.asarray(values, dtype=float)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.349) if q75 > q25 else sd
    h = 1.059 * spread * x.size ** (-0.2)
    return h if h > 0 else 1.0


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with a fixed bandwidth or Scott's rule."""

    bandwidth: float = 0.15
    rule: str = "fixed"

    def __post_init__(self):
        if self.rule not in ("fixed", "scott"):
            raise ConfigError("bandwidth rule must be 'fixed' or 'scott'")
        if self.rule == "fixed" and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")

    def resolve(self, values) -> float:
        return scott_bandwidth(values) if self.rule == "scott" else float(self.bandwidth)


def kde(points, eta: float, h: float, weights=None) -> np.ndarray:
    """Per-point contributions ``w * K((x - eta) / h) / h``."""
    out = gaussian_kernel((np.asarray(points, dtype=float) - eta) / h) / h
    return out if weights is None else out * weights


@dataclass(frozen=True)
class InferenceResult:
    j0: float
    j0_dm: float
    j0_ipw: float
    j0_dr: float
    psi_mean_sq: float
    sigma2: float
    ci: tuple
    diagnostics: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# estimating function
# ---------------------------------------------------------------------------


def psi_values(prepared: Prepared, eta, tau: float, method: str = "dr") -> np.ndarray:
    """Per-subject estimating function at ``eta``, indexed by dataset row.

    ``eta`` is a scalar or one value per fold.
    """
    etas = np.broadcast_to(np.asarray(eta, dtype=float), (prepared.folds.num_folds,))
    out = np.zeros(prepared.n)
    for s in range(prepared.folds.num_folds):
        z, c, subj = prepared.points(method, s)
        contrib = c * ((z < etas[s]).astype(float) - tau)
        out += np.bincount(subj, weights=contrib, minlength=prepared.n)
    return out


def psi_value(prepared: Prepared, subject: int, eta: float, tau: float, method: str = "dr") -> float:
    return float(psi_values(prepared, eta, tau, method)[subject])


# ---------------------------------------------------------------------------
# density of the target return
# ---------------------------------------------------------------------------


def _aligned(dataset, rows, policy, k):
    """Rows whose actions after stage ``k`` have positive target probability."""
    keep = np.ones(rows.shape[0], dtype=bool)
    r = np.arange(rows.shape[0])
    for kk in range(k + 1, dataset.horizon + 1):
        p = policy.probs(kk, dataset.history(kk)[rows], dataset.layout)
        keep &= p[r, dataset.actions[rows, kk - 1]] > 0
    return rows[keep]


class _RolloutDensity:
    """Kernel estimate over cached roll-outs; fallback remaining-sum density."""

    def __init__(self, terms, k):
        self.terms = terms
        self.k = k


def remaining_density_models(prepared: Prepared) -> tuple:
    """Per fold, per stage models of the remaining return given ``(H_k, A_k)``.

    The last stage reuses the reward model.  Earlier stages fit a mixture
    network on training subjects whose later actions agree with the target
    policy; with fewer than ``MIN_ALIGNED_ROWS`` such rows, or with supplied
    (non-fitted) outcome models, the cached roll-outs are kernel smoothed
    instead.
    """
    key = ("remaining",)
    if key in prepared._cache:
        return prepared._cache[key]
    ds = prepared.dataset
    K = ds.horizon
    layout = ds.layout
    tail = np.cumsum(ds.rewards[:, ::-1], axis=1)[:, ::-1]
    out = []
    for fn, terms in zip(prepared.nuisances, prepared.terms):
        models = []
        for k in range(1, K + 1):
            if k == K:
                models.append(fn.outcome[K - 1])
                continue
            rows = _aligned(ds, fn.train_indices, prepared.policy, k)
            if prepared.options.outcome != "fit" or rows.shape[0] < MIN_ALIGNED_ROWS:
                if prepared.options.outcome == "fit":
                    warnings.warn(
                        f"fold {fn.fold}, stage {k}: only {rows.shape[0]} aligned rows; "
                        "using kernel-smoothed roll-outs", stacklevel=2)
                models.append(_RolloutDensity(terms, k))
                continue
            X = _features(ds.history(k)[rows], layout, k, ds.actions[rows, k - 1])
            stream = prepared.rng.child("fold", fn.fold, "remaining", k)
            models.append(fit_mdn(X, tail[rows, k - 1], prepared.options.mdn, stream))
        out.append(tuple(models))
    prepared._cache[key] = tuple(out)
    return prepared._cache[key]


def _stage_density(prepared: Prepared, fold: int, k: int, model, r, h: float) -> np.ndarray:
    """``sum_a pi_k(a|H_k) f_k(r | H_k, a)`` for the fold's subjects."""
    terms = prepared.terms[fold]
    if isinstance(model, _RolloutDensity):
        u = (r[:, None] - terms.rollouts[k - 1]) / h
        return np.sum(terms.rollout_weights[k - 1] * gaussian_kernel(u), axis=1) / h
    ds = prepared.dataset
    H = ds.history(k)[terms.indices]
    p = prepared.policy.probs(k, H, ds.layout)
    out = np.zeros(terms.n)
    for a in range(ds.num_actions):
        live = p[:, a] > 0
        if np.any(live):
            feats = _features(H[live], ds.layout, k, np.full(int(live.sum()), a))
            out[live] += p[live, a] * model.pdf(feats, r[live])
    return out


def _eta_per_fold(prepared, eta):
    return np.broadcast_to(np.asarray(eta, dtype=float), (prepared.folds.num_folds,))


def j0_dm(prepared: Prepared, eta_hat, kernel: KernelSpec = KernelSpec()) -> float:
    """Average over subjects of the modelled target-return density at ``eta_hat``."""
    models = remaining_density_models(prepared)
    h = kernel.resolve(prepared.dataset.cumulative_rewards())
    total = 0.0
    for s, e in enumerate(_eta_per_fold(prepared, eta_hat)):
        t = prepared.terms[s]
        total += float(np.sum(_stage_density(prepared, s, 1, models[s][0], np.full(t.n, e), h)))
    return total / prepared.n


def j0_ipw(prepared: Prepared, eta_hat, kernel: KernelSpec = KernelSpec()) -> float:
    """Importance-weighted kernel density of the observed returns at ``eta_hat``."""
    h = kernel.resolve(prepared.dataset.cumulative_rewards())
    total = 0.0
    for s, e in enumerate(_eta_per_fold(prepared, eta_hat)):
        t = prepared.terms[s]
        W, _ = t.coefficients("ipw")
        total += float(np.sum(kde(t.outcome, e, h, W)))
    return total / prepared.n


def j0_dr(prepared: Prepared, eta_hat, kernel: KernelSpec = KernelSpec()) -> float:
    """Weighted kernel density plus the stage-wise model corrections (unfloored)."""
    h = kernel.resolve(prepared.dataset.cumulative_rewards())
    models = None
    total = 0.0
    for s, e in enumerate(_eta_per_fold(prepared, eta_hat)):
        t = prepared.terms[s]
        W, C = t.coefficients("dr")
        total += float(np.sum(kde(t.outcome, e, h, W)))
        for k in range(1, C.shape[1] + 1):
            live = C[:, k - 1] != 0
            if not np.any(live):
                continue
            if models is None:
                models = remaining_density_models(prepared)
            dens = _stage_density(prepared, s, k, models[s][k - 1], e - t.prefix[:, k - 1], h)
            total += float(np.sum(C[live, k - 1] * dens[live]))
    return total / prepared.n


def sandwich_variance(psi_by_fold, j0: float) -> float:
    """``(1/S) sum_s mean(psi_s^2) / j0^2`` over the per-fold psi arrays."""
    if not j0 > 0:
        raise ConfigError("j0 must be positive")
    msq = float(np.mean([np.mean(np.square(p)) for p in psi_by_fold]))
    return msq / (j0 * j0)


def wald_ci(eta_hat: float, sigma2: float, n: int, alpha: float = 0.05) -> tuple:
    """``eta_hat -/+ z_{1-alpha/2} * sigma / sqrt(n)``."""
    if sigma2 < 0:
        raise ConfigError("sigma2 must be nonnegative")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * math.sqrt(sigma2 / n)
    return (eta_hat - half, eta_hat + half)


def quantile_inference(prepared: Prepared, tau: float, eta_hat: float, fold_etas=None,
                       method: str = "dr", kernel: KernelSpec | None = None,
                       alpha: float = 0.05) -> InferenceResult:
    """Density, sandwich variance and Wald interval at ``eta_hat``.

    ``psi`` is evaluated at each fold's own estimate when ``fold_etas`` is
    given, otherwise at ``eta_hat``.  The density of the estimator's own
    method enters the variance, floored at ``J0_FLOOR``.
    """
    kernel = kernel or KernelSpec()
    at = eta_hat if fold_etas is None else fold_etas
    psi = psi_values(prepared, at, tau, method)
    by_fold = [psi[prepared.folds.indices(s)] for s in range(prepared.folds.num_folds)]
    jd = j0_dm(prepared, eta_hat, kernel) if method == "dm" else math.nan
    ji = j0_ipw(prepared, eta_hat, kernel)
    jr = j0_dr(prepared, eta_hat, kernel) if method == "dr" else math.nan
    raw = {"dm": jd, "ipw": ji, "dr": jr}[method]
    unstable = not raw > J0_FLOOR
    j0 = max(raw, J0_FLOOR) if np.isfinite(raw) else J0_FLOOR
    sigma2 = sandwich_variance(by_fold, j0)
    ci = wald_ci(eta_hat, sigma2, prepared.n, alpha)
    diag = {"j0_raw": raw, "unstable": unstable,
            "bandwidth": kernel.resolve(prepared.dataset.cumulative_rewards())}
    if unstable:
        logger.warning("tau=%g: density estimate %.3g at or below floor; variance unstable", tau, raw)
    return InferenceResult(j0, jd, ji, jr, float(np.mean([np.mean(p * p) for p in by_fold])),
                           sigma2, ci, diag)
