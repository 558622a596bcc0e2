"""Behavior-policy estimation with gradient-boosted trees.

Each stage gets its own classifier mapping the flattened history ``H_k`` to
the logged action ``A_k``.  Trees are second-order (Newton) regression trees
grown by :mod:`qope._kernels`.  Two actions use a single logistic ensemble,
more actions use one softmax score per class.  Predictions are clipped to a
positivity floor and renormalized.

Text dump format (one record per line, whitespace separated)::

    qope-gbdt 1
    stage <k> actions <m> features <d> rounds <T> learning_rate <lr> clip_floor <eps>
    base <s_0> ... <s_{c-1}>
    tree <class> <round> <num_nodes>
    <feature> <threshold> <left> <right> <value>      # num_nodes lines, breadth-first

A leaf has feature ``-1``.  Floats are written with ``repr`` so a dump
round-trips exactly.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import ConfigError, ContractError, Dataset, HistoryLayout, HistoryPrefix, Policy

logger = logging.getLogger(__name__)

_FORMAT_TAG = "qope-gbdt"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbdtConfig:
    """Boosting hyperparameters.

    ``clip_floor=0`` disables clipping entirely, which lets experiments
    reproduce the instability of unclipped inverse weights.
    """

    rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 10
    clip_floor: float = 0.01
    l2: float = 1.0
    min_gain: float = 1e-10

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if not 0 <= self.clip_floor < 0.5:
            raise ConfigError("clip_floor must lie in [0, 0.5)")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


def clip_probabilities(p: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below ``floor`` to ``floor`` and rescale the rest.

    Entries pinned at the floor stay there while the free entries are
    rescaled to fill the remaining mass; repeated until no free entry drops
    below the floor.  Rows keep summing to one.
    """
    p = np.asarray(p, dtype=float)
    if floor <= 0:
        return p / p.sum(axis=1, keepdims=True)
    m = p.shape[1]
    if floor * m > 1:
        raise ConfigError(f"clip floor {floor} infeasible for {m} actions")
    p = p / p.sum(axis=1, keepdims=True)
    pinned = p < floor
    for _ in range(m):
        free_mass = np.where(pinned, 0.0, p).sum(axis=1, keepdims=True)
        target = 1.0 - floor * pinned.sum(axis=1, keepdims=True)
        scale = np.divide(target, free_mass, out=np.ones_like(free_mass), where=free_mass > 0)
        q = np.where(pinned, floor, p * scale)
        newly = (~pinned) & (q < floor)
        if not newly.any():
            return q
        pinned |= newly
    return np.where(pinned, floor, q)


@dataclass(frozen=True, eq=False)
class Forest:
    """Stacked trees, arrays of shape ``(T, max_nodes)``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def num_trees(self) -> int:
        return self.feature.shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.num_trees == 0:
            return np.zeros(X.shape[0])
        return _kernels.predict_forest(
            np.ascontiguousarray(X, dtype=float),
            self.feature, self.threshold, self.left, self.right, self.value,
        )


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Fitted stage-``k`` behavior-policy classifier.

    ``forests`` holds one score ensemble for the binary logistic link or one
    per class for the softmax link.  Leaf values already include the
    learning rate.
    """

    stage: int
    num_actions: int
    feature_dim: int
    base_score: np.ndarray
    forests: tuple
    learning_rate: float
    clip_floor: float
    train_loss: tuple = field(default=())

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise ContractError(f"expected histories with {self.feature_dim} columns")
        return np.column_stack([b + f.predict(X) for b, f in zip(self.base_score, self.forests)])

    def raw_probs(self, X: np.ndarray) -> np.ndarray:
        """Unclipped class probabilities, shape (n, m)."""
        return _link(self.scores(X), self.num_actions)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Clipped, renormalized class probabilities, shape (n, m)."""
        return clip_probabilities(self.raw_probs(X), self.clip_floor)

    def probs(self, stage: int, histories: np.ndarray, layout: HistoryLayout | None = None) -> np.ndarray:
        if stage != self.stage:
            raise ContractError(f"model fitted for stage {self.stage}, asked for stage {stage}")
        return self.predict(histories)

    def to_text(self) -> str:
        lines = [
            f"{_FORMAT_TAG} {_FORMAT_VERSION}",
            f"stage {self.stage} actions {self.num_actions} features {self.feature_dim} "
            f"rounds {self.forests[0].num_trees} learning_rate {self.learning_rate!r} "
            f"clip_floor {self.clip_floor!r}",
            "base " + " ".join(repr(float(b)) for b in self.base_score),
        ]
        for c, forest in enumerate(self.forests):
            for t in range(forest.num_trees):
                used = _used_nodes(forest.feature[t], forest.left[t], forest.right[t])
                lines.append(f"tree {c} {t} {used}")
                for j in range(used):
                    lines.append(
                        f"{forest.feature[t, j]} {float(forest.threshold[t, j])!r} "
                        f"{forest.left[t, j]} {forest.right[t, j]} {float(forest.value[t, j])!r}"
                    )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PropensityModel":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0][0] != _FORMAT_TAG or int(rows[0][1]) != _FORMAT_VERSION:
            raise ContractError("not a qope GBDT dump")
        head = dict(zip(rows[1][::2], rows[1][1::2]))
        stage, m, d = int(head["stage"]), int(head["actions"]), int(head["features"])
        rounds = int(head["rounds"])
        base = np.array([float(v) for v in rows[2][1:]])
        trees: dict[int, list] = {c: [] for c in range(base.shape[0])}
        width = 1
        pos = 3
        while pos < len(rows):
            _, c, _, used = rows[pos]
            nodes = np.array([[float(v) for v in r] for r in rows[pos + 1 : pos + 1 + int(used)]])
            trees[int(c)].append(nodes)
            width = max(width, int(used))
            pos += 1 + int(used)
        forests = []
        for c in range(base.shape[0]):
            if len(trees[c]) != rounds:
                raise ContractError("tree count in dump does not match header")
            arrs = [np.full((rounds, width), -1, dtype=np.int64), np.zeros((rounds, width)),
                    np.full((rounds, width), -1, dtype=np.int64),
                    np.full((rounds, width), -1, dtype=np.int64), np.zeros((rounds, width))]
            for t, nodes in enumerate(trees[c]):
                u = nodes.shape[0]
                arrs[0][t, :u] = nodes[:, 0].astype(np.int64)
                arrs[1][t, :u] = nodes[:, 1]
                arrs[2][t, :u] = nodes[:, 2].astype(np.int64)
                arrs[3][t, :u] = nodes[:, 3].astype(np.int64)
                arrs[4][t, :u] = nodes[:, 4]
            forests.append(Forest(*arrs))
        return cls(stage, m, d, base, tuple(forests), float(head["learning_rate"]),
                   float(head["clip_floor"]))


def _used_nodes(feature, left, right) -> int:
    used = 1
    for j in range(feature.shape[0]):
        if feature[j] >= 0:
            used = max(used, right[j] + 1)
    return int(used)


def _link(scores: np.ndarray, num_actions: int) -> np.ndarray:
    if num_actions == 2 and scores.shape[1] == 1:
        p1 = 1.0 / (1.0 + np.exp(-scores[:, 0]))
        return np.column_stack([1.0 - p1, p1])
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _deviance(p: np.ndarray, y: np.ndarray) -> float:
    """Mean multinomial deviance (negative log-likelihood) of labels ``y``."""
    py = p[np.arange(y.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(py, 1e-300))))


def fit_gbdt(X: np.ndarray, y: np.ndarray, num_actions: int, config: GbdtConfig = GbdtConfig(),
             stage: int = 1) -> PropensityModel:
    """Fit a boosted classifier of labels ``y`` in ``0..num_actions-1`` on ``X``."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if n == 0:
        raise ConfigError("cannot fit a propensity model on zero rows")
    counts = np.bincount(y, minlength=num_actions)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        warnings.warn(f"stage {stage}: actions {missing} absent from training data", stacklevel=2)
    order = np.ascontiguousarray(np.stack([np.argsort(X[:, f], kind="stable") for f in range(d)]))
    binary = num_actions == 2
    if binary:
        base = np.array([np.log((counts[1] + 0.5) / (counts[0] + 0.5))])
    else:
        base = np.log((counts + 0.5) / (n + 0.5 * num_actions))
    nscore = base.shape[0]
    F = np.tile(base, (n, 1))
    Y = np.zeros((n, num_actions))
    Y[np.arange(n), y] = 1.0
    max_nodes = 2 ** (config.max_depth + 1) - 1
    arrays = [
        [np.full((config.rounds, max_nodes), -1, dtype=np.int64), np.zeros((config.rounds, max_nodes)),
         np.full((config.rounds, max_nodes), -1, dtype=np.int64),
         np.full((config.rounds, max_nodes), -1, dtype=np.int64), np.zeros((config.rounds, max_nodes))]
        for _ in range(nscore)
    ]
    losses = []
    for t in range(config.rounds):
        p = _link(F, num_actions)
        losses.append(_deviance(p, y))
        for c in range(nscore):
            pc = p[:, 1] if binary else p[:, c]
            yc = Y[:, 1] if binary else Y[:, c]
            g = np.ascontiguousarray(pc - yc)
            h = np.ascontiguousarray(np.maximum(pc * (1.0 - pc), 1e-16))
            feat, thr, left, right, value, node_of = _kernels.build_tree(
                X, g, h, order, config.max_depth, config.min_samples_leaf, config.l2, config.min_gain
            )
            value = value * config.learning_rate
            for arr, part in zip(arrays[c], (feat, thr, left, right, value)):
                arr[t] = part
            F[:, c] += value[node_of]
    losses.append(_deviance(_link(F, num_actions), y))
    forests = tuple(Forest(*arrs) for arrs in arrays)
    return PropensityModel(stage, num_actions, d, base, forests, config.learning_rate,
                           config.clip_floor, tuple(losses))


def fit_propensity(dataset: Dataset, stage: int, train_indices, config: GbdtConfig = GbdtConfig(),
                   rng=None) -> PropensityModel:
    """Estimate ``b_k(a | H_k)`` from the rows ``train_indices``.

    Tree growth is deterministic, so ``rng`` is accepted for interface
    symmetry with the other nuisance fits and not consumed.
    """
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("train_indices is empty")
    H = dataset.history(stage)[idx]
    A = dataset.actions[idx, stage - 1]
    return fit_gbdt(H, A, dataset.num_actions, config, stage=stage)


@dataclass(frozen=True)
class OraclePropensity:
    """Known behavior policy used in place of a fitted classifier."""

    policy: Policy
    stage: int
    layout: HistoryLayout
    clip_floor: float = 0.0

    def predict(self, X: np.ndarray) -> np.ndarray:
        p = self.policy.probs(self.stage, np.asarray(X, dtype=float), self.layout)
        return clip_probabilities(p, self.clip_floor) if self.clip_floor > 0 else p

    def probs(self, stage: int, histories: np.ndarray, layout: HistoryLayout | None = None) -> np.ndarray:
        if stage != self.stage:
            raise ContractError(f"oracle bound to stage {self.stage}, asked for stage {stage}")
        return self.predict(histories)


def predict_propensity(model, history: HistoryPrefix) -> np.ndarray:
    """Probability vector over actions for a single history prefix."""
    if history.stage != model.stage:
        raise ContractError(f"model is for stage {model.stage}, history is stage {history.stage}")
    return model.predict(history.values[None, :])[0]
