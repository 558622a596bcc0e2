"""Mixture density networks for conditional reward distributions.

A small tanh network maps standardized features to a ``J``-component
Gaussian mixture over a robust-standardized target.  Training minimizes the
mean negative log-likelihood with Adam; the forward/backward pass lives in
:mod:`qope._kernels`.

The estimators only call ``sample``, ``pdf``, ``cdf`` and ``mean`` on a
feature matrix, so any object with those methods (for instance the
closed-form reward laws of the simulation module) can stand in for a
fitted network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .core import ConfigError, ContractError, as_generator

logger = logging.getLogger(__name__)

_FORMAT_TAG = "qope-mdn"
_FORMAT_VERSION = 1
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class MdnConfig:
    hidden: tuple = (8, 8)
    components: int = 4
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-2
    gradient_clip: float = 5.0
    sigma_floor: float = 1e-3
    final_lr_fraction: float = 0.05

    def __post_init__(self):
        if self.components < 1:
            raise ConfigError("components must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.gradient_clip <= 0 or self.sigma_floor <= 0:
            raise ConfigError("learning_rate, gradient_clip and sigma_floor must be positive")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("final_lr_fraction must lie in (0, 1]")
        if any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")


@dataclass(frozen=True, eq=False)
class MdnModel:
    """Fitted conditional Gaussian mixture.

    Parameters
    ----------
    theta : flat parameter vector (see ``_kernels._pykernels``).
    sizes : layer widths, input first, ``3 * J`` last.
    x_mean, x_scale : feature standardization from the training rows.
    y_center, y_scale : target standardization; the mixture is fitted to
        ``(r - y_center) / y_scale``.
    sigma_floor : lower bound on the standardized component scales.
    losses : per-epoch mean training NLL (standardized units).
    """

    theta: np.ndarray
    sizes: tuple
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float
    sigma_floor: float = 1e-3
    losses: tuple = field(default=())

    @property
    def input_dim(self) -> int:
        return int(self.sizes[0])

    @property
    def components(self) -> int:
        return int(self.sizes[-1]) // 3

    def _raw(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ContractError(f"expected {self.input_dim} features, got {X.shape[1]}")
        a = (X - self.x_mean) / self.x_scale
        off = 0
        nl = len(self.sizes) - 1
        for l in range(nl):
            fi, fo = self.sizes[l], self.sizes[l + 1]
            W = self.theta[off : off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = self.theta[off : off + fo]
            off += fo
            a = a @ W + b
            if l < nl - 1:
                a = np.tanh(a)
        return a

    def mixture(self, X):
        """Weights, means and scales in target units, each of shape (n, J)."""
        out = self._raw(X)
        J = self.components
        logits = out[:, :J]
        logits = logits - logits.max(axis=1, keepdims=True)
        alpha = np.exp(logits)
        alpha /= alpha.sum(axis=1, keepdims=True)
        mu = self.y_center + self.y_scale * out[:, J : 2 * J]
        log_sigma = np.maximum(out[:, 2 * J :], np.log(self.sigma_floor))
        sigma = self.y_scale * np.exp(log_sigma)
        return alpha, mu, sigma

    def pdf(self, X, r):
        """Density at ``r``; ``r`` broadcasts against the rows, e.g. (n,) or (n, q)."""
        alpha, mu, sigma = self.mixture(X)
        r = np.asarray(r, dtype=float)
        extra = r.ndim == 2
        rr = r[:, :, None] if extra else r[..., None]
        A, M, S = (alpha[:, None, :], mu[:, None, :], sigma[:, None, :]) if extra else (alpha, mu, sigma)
        z = (rr - M) / S
        return np.sum(A * np.exp(-0.5 * z * z) * _INV_SQRT_2PI / S, axis=-1)

    def logpdf(self, X, r):
        alpha, mu, sigma = self.mixture(X)
        r = np.asarray(r, dtype=float)
        z = (r[..., None] - mu) / sigma
        lp = np.log(alpha) - 0.5 * z * z - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        top = lp.max(axis=-1, keepdims=True)
        return top[..., 0] + np.log(np.exp(lp - top).sum(axis=-1))

    def cdf(self, X, r):
        alpha, mu, sigma = self.mixture(X)
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            return np.sum(alpha[:, None, :] * ndtr((r[:, :, None] - mu[:, None, :]) / sigma[:, None, :]), axis=-1)
        return np.sum(alpha * ndtr((r[..., None] - mu) / sigma), axis=-1)

    def mean(self, X):
        alpha, mu, _ = self.mixture(X)
        return np.sum(alpha * mu, axis=1)

    def sample(self, X, count: int, rng) -> np.ndarray:
        """``count`` draws per row, shape (n, count).

        A component is picked with probability ``alpha_j`` and a standard
        normal draw is scaled and shifted by its parameters.
        """
        gen = as_generator(rng)
        alpha, mu, sigma = self.mixture(X)
        n = alpha.shape[0]
        u = gen.random((n, count))
        cdf = np.cumsum(alpha, axis=1)
        comp = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), self.components - 1)
        z = gen.standard_normal((n, count))
        rows = np.arange(n)[:, None]
        return mu[rows, comp] + sigma[rows, comp] * z

    def nll(self, X, y) -> float:
        """Mean negative log-likelihood in standardized target units."""
        Xs = (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mean) / self.x_scale
        ys = (np.asarray(y, dtype=float) - self.y_center) / self.y_scale
        loss, _ = _kernels.mdn_nll_grad(self.theta, np.asarray(self.sizes, dtype=np.int64),
                                        np.ascontiguousarray(Xs), ys, np.log(self.sigma_floor))
        return loss

    def shifted(self, delta: float) -> "MdnModel":
        """Same network with every component mean moved by ``delta``."""
        J = self.components
        theta = self.theta.copy()
        bias_start = theta.shape[0] - 3 * J
        theta[bias_start + J : bias_start + 2 * J] += delta / self.y_scale
        return MdnModel(theta, self.sizes, self.x_mean, self.x_scale, self.y_center, self.y_scale,
                        self.sigma_floor, self.losses)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{_FORMAT_TAG} {_FORMAT_VERSION}\n")
            fh.write("sizes " + " ".join(str(int(s)) for s in self.sizes) + "\n")
            fh.write(f"components {self.components}\n")
            fh.write(f"sigma_floor {self.sigma_floor!r}\n")
            fh.write(f"y_center {float(self.y_center)!r}\ny_scale {float(self.y_scale)!r}\n")
            fh.write("x_mean " + " ".join(repr(float(v)) for v in self.x_mean) + "\n")
            fh.write("x_scale " + " ".join(repr(float(v)) for v in self.x_scale) + "\n")
            fh.write(f"params {self.theta.shape[0]}\n")
            for v in self.theta:
                fh.write(repr(float(v)) + "\n")

    @classmethod
    def load(cls, path) -> "MdnModel":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.split() for ln in fh.read().splitlines() if ln.strip()]
        if lines[0] != [_FORMAT_TAG, str(_FORMAT_VERSION)]:
            raise ContractError(f"{path} is not a qope MDN parameter file")
        head = {ln[0]: ln[1:] for ln in lines[1:9]}
        sizes = tuple(int(s) for s in head["sizes"])
        count = int(head["params"][0])
        theta = np.array([float(ln[0]) for ln in lines[9 : 9 + count]])
        if theta.shape[0] != count or int(head["components"][0]) * 3 != sizes[-1]:
            raise ContractError(f"{path}: parameter count does not match header")
        return cls(theta, sizes, np.array([float(v) for v in head["x_mean"]]),
                   np.array([float(v) for v in head["x_scale"]]), float(head["y_center"][0]),
                   float(head["y_scale"][0]), float(head["sigma_floor"][0]))


def param_count(sizes) -> int:
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


def constant_mixture(alpha, mu, sigma, input_dim: int = 1, sigma_floor: float = 1e-3) -> MdnModel:
    """Hand-built model whose mixture ignores the features."""
    alpha = np.asarray(alpha, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.maximum(np.asarray(sigma, dtype=float), sigma_floor)
    J = alpha.shape[0]
    sizes = (input_dim, 3 * J)
    theta = np.zeros(param_count(sizes))
    theta[input_dim * 3 * J :] = np.concatenate([np.log(alpha), mu, np.log(sigma)])
    return MdnModel(theta, sizes, np.zeros(input_dim), np.ones(input_dim), 0.0, 1.0, sigma_floor)


def robust_center_scale(y: np.ndarray) -> tuple[float, float]:
    """Median and IQR/1.349, falling back to the sd and then to 1."""
    center = float(np.median(y))
    q75, q25 = np.percentile(y, [75, 25])
    scale = float((q75 - q25) / 1.349)
    if not scale > 0:
        scale = float(np.std(y))
    if not scale > 0:
        scale = 1.0
    return center, scale


def init_params(sizes, y_std: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    theta = np.zeros(param_count(sizes))
    off = 0
    nl = len(sizes) - 1
    for l in range(nl):
        fi, fo = sizes[l], sizes[l + 1]
        scale = 1.0 / np.sqrt(fi) if l < nl - 1 else 0.1 / np.sqrt(fi)
        theta[off : off + fi * fo] = gen.normal(0.0, scale, size=fi * fo)
        off += fi * fo + fo
    J = sizes[-1] // 3
    bias = theta[off - 3 * J : off]
    bias[J : 2 * J] = np.quantile(y_std, (np.arange(J) + 0.5) / J)
    bias[2 * J :] = np.log(0.5)
    return theta


def lr_schedule(config: MdnConfig) -> np.ndarray:
    """Per-epoch step sizes, cosine-annealed from ``learning_rate`` to
    ``final_lr_fraction * learning_rate``; constant when the fraction is 1."""
    e = np.arange(config.epochs)
    frac = 0.5 * (1 + np.cos(np.pi * e / max(config.epochs - 1, 1)))
    lo = config.final_lr_fraction
    return config.learning_rate * (lo + (1 - lo) * frac)


def fit_mdn(features, targets, config: MdnConfig = MdnConfig(), rng=None) -> MdnModel:
    """Fit a mixture density network of ``targets`` given ``features``.

    Features are standardized with the training statistics, targets with
    their median and IQR.  Raises :class:`TrainingDiverged` when the loss
    becomes non-finite.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    n = X.shape[0]
    if n != y.shape[0]:
        raise ContractError("features and targets have different row counts")
    if n < config.components:
        raise ConfigError(f"need at least {config.components} rows to fit, got {n}")
    gen = as_generator(rng)
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    y_center, y_scale = robust_center_scale(y)
    Xs = np.ascontiguousarray((X - x_mean) / x_scale)
    ys = np.ascontiguousarray((y - y_center) / y_scale)
    sizes = (X.shape[1],) + tuple(int(h) for h in config.hidden) + (3 * config.components,)
    theta0 = init_params(sizes, ys, gen)
    perms = np.stack([gen.permutation(n) for _ in range(config.epochs)]).astype(np.int64)
    theta, losses = _kernels.mdn_train(
        theta0, np.asarray(sizes, dtype=np.int64), Xs, ys, perms, config.batch_size,
        lr_schedule(config), config.gradient_clip, np.log(config.sigma_floor),
    )
    if not np.all(np.isfinite(losses)):
        bad = int(np.argmax(~np.isfinite(losses)))
        raise TrainingDiverged(f"mixture NLL became non-finite in epoch {bad}")
    return MdnModel(theta, sizes, x_mean, x_scale, y_center, y_scale, config.sigma_floor,
                    tuple(float(v) for v in losses))


def _row(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def mdn_pdf(model, x, r) -> float:
    return float(model.pdf(_row(x), np.array([r], dtype=float))[0])


def mdn_cdf(model, x, r) -> float:
    return float(model.cdf(_row(x), np.array([r], dtype=float))[0])


def mdn_sample(model, x, count: int, rng) -> np.ndarray:
    if count < 1:
        raise ConfigError("count must be >= 1")
    return model.sample(_row(x), count, rng)[0]


def mc_expected_pinball(source, x, eta: float, tau: float, M: int = 50, rng=None) -> float:
    """Monte-Carlo estimate of ``E[rho_tau(R - eta) | x]``.

    ``source`` is either a model (``M`` draws are taken with ``rng``) or an
    array of cached pseudo-samples, which are then used as is.
    """
    from .quantile import pinball

    if isinstance(source, np.ndarray):
        draws = source.ravel()
    else:
        draws = mdn_sample(source, x, M, rng)
    return float(np.mean(pinball(draws - eta, tau)))
