"""Trajectory data model, policies, fold splitting and random streams.

Histories are stored flattened.  The stage-``k`` history ``H_k`` is laid out
as ``[X_1, onehot(A_1), R_1, X_2, onehot(A_2), R_2, ..., X_k]`` so every
stage-``k`` nuisance model consumes a fixed-width feature vector.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration (bad fold count, bad quantile level, ...)."""


class DataFormatError(ValueError):
    """Malformed dataset input; carries the offending row/column when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, float):
        return zlib.crc32(repr(key).encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


@dataclass(frozen=True)
class RngStream:
    """Hierarchical, counter-based random stream.

    A stream is identified by ``(seed, path)``.  ``child`` appends to the path
    so each experiment/replicate/fold/purpose gets an independent generator
    whose draws do not depend on how work is scheduled.
    """

    seed: int
    path: tuple = ()

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=tuple(_key_to_int(k) for k in self.path),
        )
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngStream(0 if rng is None else int(rng)).generator()
    raise TypeError(f"cannot build a generator from {rng!r}")


# ---------------------------------------------------------------------------
# history layout and data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HistoryLayout:
    """Column offsets of the flattened histories for a given dataset shape."""

    covariate_dims: tuple[int, ...]
    num_actions: int

    @property
    def horizon(self) -> int:
        return len(self.covariate_dims)

    def block_start(self, k: int) -> int:
        """First column of the stage-``k`` covariate block (k is 1-based)."""
        return sum(d + self.num_actions + 1 for d in self.covariate_dims[: k - 1])

    def width(self, k: int) -> int:
        """Width of ``H_k``."""
        return self.block_start(k) + self.covariate_dims[k - 1]

    def covariate_slice(self, k: int) -> slice:
        start = self.block_start(k)
        return slice(start, start + self.covariate_dims[k - 1])

    def action_slice(self, k: int) -> slice:
        start = self.block_start(k) + self.covariate_dims[k - 1]
        return slice(start, start + self.num_actions)

    def reward_column(self, k: int) -> int:
        return self.block_start(k) + self.covariate_dims[k - 1] + self.num_actions


@dataclass(frozen=True)
class StageRecord:
    covariates: tuple[float, ...]
    action: int
    reward: float


@dataclass(frozen=True)
class Trajectory:
    stages: tuple[StageRecord, ...]

    @property
    def horizon(self) -> int:
        return len(self.stages)

    def rewards(self) -> tuple[float, ...]:
        return tuple(s.reward for s in self.stages)


@dataclass(frozen=True)
class HistoryPrefix:
    """Observed data ``{X_1, A_1, R_1, ..., X_k}`` preceding action ``A_k``."""

    stage: int
    values: np.ndarray
    layout: HistoryLayout

    def __post_init__(self):
        if not 1 <= self.stage <= self.layout.horizon:
            raise ContractError(f"stage {self.stage} outside 1..{self.layout.horizon}")
        if self.values.shape != (self.layout.width(self.stage),):
            raise ContractError(
                f"history of stage {self.stage} must have {self.layout.width(self.stage)} values"
            )

    def covariates(self, k: int | None = None) -> np.ndarray:
        return self.values[self.layout.covariate_slice(self.stage if k is None else k)]


def cumulative_reward(trajectory: Trajectory) -> float:
    """Sum of the stage rewards of one trajectory."""
    return float(math.fsum(trajectory.rewards()))


def one_hot(actions: np.ndarray, num_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((actions.shape[0], num_actions))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """N logged trajectories of horizon K over ``num_actions`` actions.

    Stored column-wise: ``covariates[k-1]`` has shape ``(N, d_k)``,
    ``actions`` and ``rewards`` have shape ``(N, K)``.
    """

    covariates: tuple[np.ndarray, ...]
    actions: np.ndarray
    rewards: np.ndarray
    num_actions: int

    def __post_init__(self):
        covs = tuple(
            _frozen(np.asarray(c, dtype=float).reshape(len(c), -1)) for c in self.covariates
        )
        actions = np.asarray(self.actions)
        rewards = np.asarray(self.rewards, dtype=float)
        if actions.ndim == 1:
            actions = actions[:, None]
        if rewards.ndim == 1:
            rewards = rewards[:, None]
        if len(covs) == 0:
            raise DataFormatError("dataset needs at least one stage")
        n = actions.shape[0]
        if n < 1:
            raise DataFormatError("dataset needs at least one trajectory")
        if actions.shape != (n, len(covs)) or rewards.shape != (n, len(covs)):
            raise DataFormatError("actions/rewards must have shape (N, K)")
        if any(c.shape[0] != n for c in covs):
            raise DataFormatError("covariate blocks disagree on N")
        if not np.all(np.equal(np.mod(actions, 1), 0)):
            raise DataFormatError("actions must be integers")
        actions = actions.astype(np.int64)
        if self.num_actions < 1 or actions.min() < 0 or actions.max() >= self.num_actions:
            raise DataFormatError(f"actions must lie in 0..{self.num_actions - 1}")
        if not np.all(np.isfinite(rewards)) or not all(np.all(np.isfinite(c)) for c in covs):
            raise DataFormatError("non-finite covariate or reward")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "actions", _frozen(actions))
        object.__setattr__(self, "rewards", _frozen(rewards))

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return len(self.covariates)

    @property
    def covariate_dims(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.covariates)

    @property
    def layout(self) -> HistoryLayout:
        return HistoryLayout(self.covariate_dims, self.num_actions)

    def history(self, k: int) -> np.ndarray:
        """Flattened ``H_k`` for every trajectory, shape ``(N, width_k)``."""
        blocks = []
        for j in range(1, k):
            blocks += [
                self.covariates[j - 1],
                one_hot(self.actions[:, j - 1], self.num_actions),
                self.rewards[:, j - 1 : j],
            ]
        blocks.append(self.covariates[k - 1])
        return np.hstack(blocks)

    def history_prefix(self, i: int, k: int) -> HistoryPrefix:
        return HistoryPrefix(k, self.history(k)[i], self.layout)

    def cumulative_rewards(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            tuple(c[idx] for c in self.covariates),
            self.actions[idx],
            self.rewards[idx],
            self.num_actions,
        )

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            tuple(
                StageRecord(
                    tuple(float(v) for v in self.covariates[k][i]),
                    int(self.actions[i, k]),
                    float(self.rewards[i, k]),
                )
                for k in range(self.horizon)
            )
        )

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], num_actions: int) -> "Dataset":
        if len(trajectories) == 0:
            raise DataFormatError("dataset needs at least one trajectory")
        horizon = trajectories[0].horizon
        if any(t.horizon != horizon for t in trajectories):
            raise DataFormatError("all trajectories must share the horizon")
        covs = []
        for k in range(horizon):
            dims = {len(t.stages[k].covariates) for t in trajectories}
            if len(dims) != 1:
                raise DataFormatError(f"stage {k + 1} covariate dimension differs across trajectories")
            covs.append(np.array([t.stages[k].covariates for t in trajectories], dtype=float))
        actions = np.array([[s.action for s in t.stages] for t in trajectories])
        rewards = np.array([[s.reward for s in t.stages] for t in trajectories], dtype=float)
        return cls(tuple(covs), actions, rewards, num_actions)


# ---------------------------------------------------------------------------
# CSV interchange: traj_id,stage,x_0..x_{d-1},action,reward
# ---------------------------------------------------------------------------


def write_dataset_csv(dataset: Dataset, path, header_lines: Iterable[str] = ()) -> None:
    dmax = max(dataset.covariate_dims)
    cols = ["traj_id", "stage"] + [f"x_{j}" for j in range(dmax)] + ["action", "reward"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(dataset.n):
            for k in range(dataset.horizon):
                x = [repr(float(v)) for v in dataset.covariates[k][i]]
                x += [""] * (dmax - len(x))
                w.writerow([i, k + 1, *x, int(dataset.actions[i, k]), repr(float(dataset.rewards[i, k]))])


def read_dataset_csv(path, num_actions: int | None = None) -> Dataset:
    """Parse the long CSV format; errors carry the 1-based file row."""
    rows: dict[str, dict[int, tuple[list[float], int, float]]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i + 1, ln) for i, ln in enumerate(fh) if not ln.startswith("#") and ln.strip()]
    if not lines:
        raise DataFormatError("empty dataset file")
    reader = csv.reader([ln for _, ln in lines])
    header = next(reader)
    header = [h.strip() for h in header]
    for needed in ("traj_id", "stage", "action", "reward"):
        if needed not in header:
            raise DataFormatError("missing required column", row=lines[0][0], column=needed)
    xcols = [h for h in header if h.startswith("x_")]
    expected = [f"x_{j}" for j in range(len(xcols))]
    if xcols != expected:
        raise DataFormatError("covariate columns must be x_0..x_{d-1}", row=lines[0][0])
    pos = {h: j for j, h in enumerate(header)}
    max_action = -1
    for (lineno, _), rec in zip(lines[1:], reader):
        if len(rec) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(rec)}", row=lineno)
        tid = rec[pos["traj_id"]].strip()
        try:
            stage = int(rec[pos["stage"]])
        except ValueError:
            raise DataFormatError("stage is not an integer", row=lineno, column="stage") from None
        try:
            action = int(rec[pos["action"]])
        except ValueError:
            raise DataFormatError("action is not an integer", row=lineno, column="action") from None
        try:
            reward = float(rec[pos["reward"]])
        except ValueError:
            raise DataFormatError("reward is not a number", row=lineno, column="reward") from None
        xs = []
        for c in xcols:
            v = rec[pos[c]].strip()
            if v == "":
                continue
            try:
                xs.append(float(v))
            except ValueError:
                raise DataFormatError("covariate is not a number", row=lineno, column=c) from None
        if not (math.isfinite(reward) and all(math.isfinite(x) for x in xs)):
            raise DataFormatError("non-finite value", row=lineno)
        if action < 0:
            raise DataFormatError("negative action", row=lineno, column="action")
        max_action = max(max_action, action)
        if tid not in rows:
            rows[tid] = {}
            order.append(tid)
        if stage in rows[tid]:
            raise DataFormatError(f"duplicate stage {stage} for trajectory {tid}", row=lineno)
        rows[tid][stage] = (xs, action, reward)
    if not order:
        raise DataFormatError("dataset has a header but no records")
    horizon = max(len(v) for v in rows.values())
    trajs = []
    for tid in order:
        st = rows[tid]
        if sorted(st) != list(range(1, horizon + 1)):
            raise DataFormatError(f"trajectory {tid} does not have stages 1..{horizon}")
        trajs.append(
            Trajectory(tuple(StageRecord(tuple(st[k][0]), st[k][1], st[k][2]) for k in range(1, horizon + 1)))
        )
    m = num_actions if num_actions is not None else max(max_action + 1, 2)
    if max_action >= m:
        raise DataFormatError(f"action {max_action} outside declared action space of size {m}")
    return Dataset.from_trajectories(trajs, m)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    num_folds: int

    def indices(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == s)

    def complement(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != s)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.num_folds)


def split_folds(n: int, s: int, rng) -> FoldAssignment:
    """Uniformly random partition of ``range(n)`` into ``s`` near-equal folds."""
    if s < 1 or s > n:
        raise ConfigError(f"need 1 <= folds <= n, got folds={s}, n={n}")
    if n % s:
        logger.warning("%d subjects do not divide evenly into %d folds; sizes differ by one", n, s)
    perm = as_generator(rng).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % s
    fold_of.setflags(write=False)
    return FoldAssignment(fold_of, s)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


class Policy(ABC):
    """Probability mass ``pi_k(a | H_k)`` over ``num_actions`` actions."""

    num_actions: int

    @abstractmethod
    def probs(self, stage: int, histories: np.ndarray, layout: HistoryLayout) -> np.ndarray:
        """Action probabilities for a batch of stage-``stage`` histories, shape (n, m)."""

    def prob(self, history: HistoryPrefix, action: int) -> float:
        return float(self.probs(history.stage, history.values[None, :], history.layout)[0, action])

    def sample(self, stage: int, histories: np.ndarray, layout: HistoryLayout, gen) -> np.ndarray:
        p = self.probs(stage, histories, layout)
        u = gen.random(p.shape[0])
        cdf = np.cumsum(p, axis=1)
        return np.minimum((u[:, None] >= cdf).sum(axis=1), p.shape[1] - 1)

    def greedy(self, stage: int, histories: np.ndarray, layout: HistoryLayout) -> np.ndarray:
        return np.argmax(self.probs(stage, histories, layout), axis=1)


@dataclass(frozen=True)
class ThresholdPolicy(Policy):
    """Deterministic rule: action ``above`` when ``X_k[covariate] > threshold``.

    With the defaults this is ``pi_k(1 | H_k) = I{X_k > 0}``.
    """

    threshold: float = 0.0
    covariate: int = 0
    above: int = 1
    below: int = 0
    num_actions: int = 2

    def probs(self, stage, histories, layout):
        x = histories[:, layout.covariate_slice(stage)][:, self.covariate]
        out = np.zeros((histories.shape[0], self.num_actions))
        hi = x > self.threshold
        out[hi, self.above] = 1.0
        out[~hi, self.below] = 1.0
        return out


@dataclass(frozen=True)
class TabularPolicy(Policy):
    """History-independent stochastic policy; ``table`` is (m,) or (K, m)."""

    table: tuple

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.table, dtype=float))
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("tabular policy rows must be probability vectors")

    @property
    def num_actions(self) -> int:
        return np.atleast_2d(np.asarray(self.table)).shape[1]

    def probs(self, stage, histories, layout):
        t = np.atleast_2d(np.asarray(self.table, dtype=float))
        row = t[min(stage - 1, t.shape[0] - 1)]
        return np.tile(row, (histories.shape[0], 1))


def uniform_policy(num_actions: int) -> TabularPolicy:
    return TabularPolicy(tuple([1.0 / num_actions] * num_actions))


@dataclass(frozen=True)
class CallbackPolicy(Policy):
    """Wraps ``fn(stage, histories, layout) -> (n, m)`` probabilities.

    Used for oracle behavior policies of simulated data.
    """

    fn: Callable[[int, np.ndarray, HistoryLayout], np.ndarray]
    num_actions: int = 2
    name: str = field(default="callback", compare=False)

    def probs(self, stage, histories, layout):
        return np.asarray(self.fn(stage, histories, layout), dtype=float)


def policy_prob(policy: Policy, history: HistoryPrefix, action: int) -> float:
    if not 0 <= action < policy.num_actions:
        raise ContractError(f"action {action} outside 0..{policy.num_actions - 1}")
    return policy.prob(history, action)


def parse_policy(text: str, num_actions: int = 2) -> Policy:
    """Parse ``threshold[:cov[:thr]]``, ``uniform`` or ``constant:a``."""
    parts = text.strip().split(":")
    kind = parts[0].lower()
    try:
        if kind == "threshold":
            cov = int(parts[1]) if len(parts) > 1 else 0
            thr = float(parts[2]) if len(parts) > 2 else 0.0
            return ThresholdPolicy(thr, cov, num_actions=num_actions)
        if kind == "uniform":
            return uniform_policy(num_actions)
        if kind == "constant":
            a = int(parts[1])
            row = [0.0] * num_actions
            row[a] = 1.0
            return TabularPolicy(tuple(row))
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad policy {text!r}: {exc}") from None
    raise ConfigError(f"unknown policy kind {kind!r}")
