"""Synthetic designs, ground-truth oracles and replicate-based experiments.

Two designs are provided.  In the single-stage design ``X ~ N(0,1)``, the
logged action is ``I{X + e/4 > 0}`` and the reward ``(1 - X + 2AX)(1 + e'/4)``.
The two-stage design chains two such steps, with ``X_2 = X_1/2 + e_3/2``.
All noises are Student-t with a shared ``df`` (``inf`` gives normals) and
the target policy is ``I{X_k > 0}`` at every stage.

Experiments return an :class:`ExperimentReport` holding one record per
(replicate, cell) and summary rows, both written as CSV with a comment
header listing the resolved settings.
"""
from __future__ import annotations

import functools
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate, stats

from .core import CallbackPolicy, ConfigError, Dataset, RngStream, ThresholdPolicy, as_generator
from .inference import KernelSpec, quantile_inference
from .mean import QuantileGrid, classic_dr_mean, tail_robust_mean
from .quantile import EstimatorConfig, NuisanceOptions, point_estimate, prepare

KINDS = ("single", "two")

# reference (Rquantile, Rmean) MSE values printed next to experiment summaries
REFERENCE_MSE = {
    ("single", 1.2): (0.005995, 0.594783),
    ("single", 1.5): (0.001689, 0.031051),
    ("single", 1.8): (0.000898, 0.002025),
    ("single", 2.0): (0.000993, 0.001863),
    ("single", 2.5): (0.000545, 0.000620),
    ("single", 3.0): (0.000432, 0.000445),
    ("single", 3.5): (0.000312, 0.000324),
    ("single", 4.0): (0.000371, 0.000381),
    ("two", 2.0): (0.006708, 0.027780),
    ("two", 4.0): (0.002729, 0.003945),
    ("two", 6.0): (0.002447, 0.003558),
    ("two", 8.0): (0.002427, 0.003710),
    ("two", math.inf): (0.001549, 0.002062),
}


# ---------------------------------------------------------------------------
# data-generating processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "single"
    df: float = 3.0
    n: int = 2500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if not self.df > 0:
            raise ConfigError("df must be positive")
        if self.n < 1:
            raise ConfigError("n must be >= 1")

    @property
    def horizon(self) -> int:
        return 1 if self.kind == "single" else 2


def student_t(gen, df: float, size) -> np.ndarray:
    """``Z / sqrt(V / df)`` with ``V ~ chi2(df)``; standard normal for ``df = inf``."""
    z = gen.standard_normal(size)
    if math.isinf(df):
        return z
    v = gen.chisquare(df, size)
    return z / np.sqrt(v / df)


def t_cdf(x, df: float):
    return stats.norm.cdf(x) if math.isinf(df) else stats.t.cdf(x, df)


def t_pdf(x, df: float):
    return stats.norm.pdf(x) if math.isinf(df) else stats.t.pdf(x, df)


def single_stage_reward(x, a, e):
    """``(1 - x + 2 a x)(1 + e/4)``; also the first-stage reward of the two-stage design."""
    return (1 - x + 2 * a * x) * (1 + e / 4)


def second_covariate(x1, e):
    return x1 / 2 + e / 2


def second_stage_reward(x1, a1, x2, a2, e):
    return (1 + 0.5 * x1 + a1 * x1 - x2 + 3 * a2 * x2) * (1 + e / 4)


def gen_single_stage(spec: DgpSpec, rng=None) -> Dataset:
    gen = as_generator(rng if rng is not None else RngStream(spec.seed))
    n = spec.n
    x = gen.standard_normal(n)
    e = student_t(gen, spec.df, n)
    e2 = student_t(gen, spec.df, n)
    a = (x + e / 4 > 0).astype(np.int64)
    r = single_stage_reward(x, a, e2)
    return Dataset((x[:, None],), a[:, None], r[:, None], 2)


def gen_two_stage(spec: DgpSpec, rng=None) -> Dataset:
    gen = as_generator(rng if rng is not None else RngStream(spec.seed))
    n = spec.n
    x1 = gen.standard_normal(n)
    e = [student_t(gen, spec.df, n) for _ in range(5)]
    a1 = (x1 + e[0] / 4 > 0).astype(np.int64)
    r1 = single_stage_reward(x1, a1, e[1])
    x2 = second_covariate(x1, e[2])
    a2 = (x2 + e[3] / 4 > 0).astype(np.int64)
    r2 = second_stage_reward(x1, a1, x2, a2, e[4])
    return Dataset((x1[:, None], x2[:, None]), np.column_stack([a1, a2]), np.column_stack([r1, r2]), 2)


def generate(spec: DgpSpec, rng=None) -> Dataset:
    return gen_single_stage(spec, rng) if spec.kind == "single" else gen_two_stage(spec, rng)


def target_policy(spec: DgpSpec | None = None) -> ThresholdPolicy:
    """``pi_k(1 | H_k) = I{X_k > 0}``."""
    return ThresholdPolicy(0.0, 0)


def behavior_policy(spec: DgpSpec) -> CallbackPolicy:
    """True logging probabilities ``P(A_k = 1 | H_k) = F_t(4 X_k)``."""
    df = spec.df

    def probs(stage, histories, layout):
        x = histories[:, layout.covariate_slice(stage)][:, 0]
        p1 = t_cdf(4.0 * x, df)
        return np.column_stack([1.0 - p1, p1])

    return CallbackPolicy(probs, 2, f"behavior-t{df}")


@dataclass(frozen=True)
class DgpRewardModel:
    """Exact conditional law of ``R_k`` given ``[H_k, onehot(A_k)]``.

    The reward is ``m (1 + e/4)`` with a known location ``m``, i.e. a
    Student-t scaled by ``|m|/4`` around ``m``.
    """

    kind: str
    stage: int
    df: float
    shift: float = 0.0

    def location(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.stage == 1:
            x, a = X[:, 0], X[:, 2]
            return 1 - x + 2 * a * x
        # H_2 = [X1, A1 one-hot (2), R1, X2] followed by the A2 one-hot
        x1, a1, x2, a2 = X[:, 0], X[:, 2], X[:, 4], X[:, 6]
        return 1 + 0.5 * x1 + a1 * x1 - x2 + 3 * a2 * x2

    def _loc_scale(self, X):
        m = self.location(X)
        return m + self.shift, np.maximum(np.abs(m) / 4.0, 1e-12), m

    def sample(self, X, count, rng):
        gen = as_generator(rng)
        loc, scale, _ = self._loc_scale(X)
        e = student_t(gen, self.df, (loc.shape[0], count))
        return loc[:, None] + scale[:, None] * e

    def pdf(self, X, r):
        loc, scale, _ = self._loc_scale(X)
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            loc, scale = loc[:, None], scale[:, None]
        return t_pdf((r - loc) / scale, self.df) / scale

    def cdf(self, X, r):
        loc, scale, _ = self._loc_scale(X)
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            loc, scale = loc[:, None], scale[:, None]
        return t_cdf((r - loc) / scale, self.df)

    def mean(self, X):
        return self._loc_scale(X)[0]


def reward_oracles(spec: DgpSpec, shift: float = 0.0) -> tuple:
    return tuple(DgpRewardModel(spec.kind, k, spec.df, shift) for k in range(1, spec.horizon + 1))


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def _expected_abs_shifted_normal(df: float) -> float:
    """``E|X + e|`` with ``X ~ N(0,1)`` independent of ``e ~ t(df)``."""
    if math.isinf(df):
        return 2.0 / math.sqrt(math.pi)
    if df <= 1:
        return math.inf

    def g(e):
        return (e * (2 * stats.norm.cdf(e) - 1) + 2 * stats.norm.pdf(e)) * stats.t.pdf(e, df)

    val, _ = integrate.quad(g, -np.inf, np.inf, limit=200)
    return float(val)


@functools.lru_cache(maxsize=None)
def oracle_mean(kind: str, df: float) -> float:
    """Exact mean return of the target policy (requires ``df > 1``)."""
    if not df > 1:
        raise ConfigError("the mean return exists only for df > 1")
    base = 1.0 + math.sqrt(2.0 / math.pi)
    if kind == "single":
        return base
    return base + 1.0 + 1.0 / math.sqrt(2.0 * math.pi) + 0.75 * _expected_abs_shifted_normal(df)


def simulate_target_returns(kind: str, df: float, draws: int, rng) -> np.ndarray:
    """Returns under the target policy, drawn by forcing ``A_k = I{X_k > 0}``."""
    gen = as_generator(rng)
    x1 = gen.standard_normal(draws)
    if kind == "single":
        return single_stage_reward(x1, x1 > 0, student_t(gen, df, draws))
    e2, e3, e5 = (student_t(gen, df, draws) for _ in range(3))
    a1 = x1 > 0
    r1 = single_stage_reward(x1, a1, e2)
    x2 = second_covariate(x1, e3)
    return r1 + second_stage_reward(x1, a1, x2, x2 > 0, e5)


@dataclass(frozen=True, eq=False)
class OracleLaw:
    """Empirical law of many target-policy returns."""

    draws: np.ndarray

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    def cdf(self, x):
        return np.searchsorted(self.draws, np.asarray(x, dtype=float), side="right") / self.size

    def quantile(self, tau):
        return np.quantile(self.draws, tau, method="inverted_cdf")

    def density(self, x, h: float | None = None):
        """Gaussian-kernel density from a 10^5 subsample of the draws."""
        sub = self.draws[:: max(1, self.size // 100_000)]
        h = h or 1.059 * min(np.std(sub), np.subtract(*np.percentile(sub, [75, 25])) / 1.349) * sub.size ** -0.2
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.array([np.mean(stats.norm.pdf((xi - sub) / h)) / h for xi in x])

    def quantile_se(self, tau) -> float:
        """Monte-Carlo standard error of :meth:`quantile`."""
        q = float(self.quantile(tau))
        return math.sqrt(tau * (1 - tau) / self.size) / float(self.density(q)[0])


@functools.lru_cache(maxsize=16)
def oracle_law(kind: str, df: float, draws: int = 1_000_000, seed: int = 20240101) -> OracleLaw:
    """Cached oracle draws, independent of any experiment seed."""
    r = simulate_target_returns(kind, df, draws, RngStream(seed, ("oracle", kind, repr(float(df)))))
    r.sort()
    r.setflags(write=False)
    return OracleLaw(r)


def oracle_quantile(spec: DgpSpec, tau, draws: int = 1_000_000, rng=None):
    """Empirical quantile of simulated target-policy returns."""
    if rng is None:
        return oracle_law(spec.kind, float(spec.df), draws).quantile(tau)
    r = simulate_target_returns(spec.kind, spec.df, draws, rng)
    return np.quantile(r, tau, method="inverted_cdf")


def single_stage_cdf(r: float, df: float) -> float:
    """Exact target-return cdf of the single-stage design by quadrature."""
    f = lambda x: 2.0 * stats.norm.pdf(x) * t_cdf(4.0 * (r / (1.0 + x) - 1.0), df)
    val, _ = integrate.quad(f, 0.0, np.inf, limit=200)
    return float(val)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class ExperimentReport:
    """Per-replicate records plus summary rows for one experiment."""

    experiment: str
    columns: tuple
    records: list = field(default_factory=list)
    summary_columns: tuple = ()
    summary: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def _csv(self, columns, rows) -> str:
        buf = io.StringIO()
        for key in sorted(self.settings):
            buf.write(f"# {key}={self.settings[key]}\n")
        buf.write(",".join(("experiment",) + tuple(columns)) + "\n")
        for row in rows:
            buf.write(",".join([self.experiment] + [_fmt(row[c]) for c in columns]) + "\n")
        return buf.getvalue()

    def records_csv(self) -> str:
        return self._csv(self.columns, self.records)

    def summary_csv(self) -> str:
        return self._csv(self.summary_columns, self.summary)

    def write(self, outdir) -> list:
        os.makedirs(outdir, exist_ok=True)
        paths = []
        for suffix, text in (("records", self.records_csv()), ("summary", self.summary_csv())):
            path = os.path.join(outdir, f"{self.experiment}_{suffix}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            paths.append(path)
        return paths

    def table(self) -> str:
        """Plain-text rendering of the summary rows."""
        cols = self.summary_columns
        cells = [[_short(r[c]) for c in cols] for r in self.summary]
        widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return _fmt(v)


def _settings(**kw) -> dict:
    out = {}
    for key, val in kw.items():
        if hasattr(val, "__dataclass_fields__"):
            for k2, v2 in asdict(val).items():
                out[f"{key}.{k2}"] = v2
        else:
            out[key] = val
    return out


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def experiment_config(**overrides) -> EstimatorConfig:
    """Estimator settings used by the experiments (fold-averaged estimates)."""
    return replace(EstimatorConfig(aggregation="per-fold-average"), **overrides)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    spec: DgpSpec
    replicate: int
    seed: int
    config: EstimatorConfig
    options: NuisanceOptions = NuisanceOptions()
    taus: tuple = ()
    grid: QuantileGrid | None = None
    kernels: tuple = ()
    methods: tuple = ("dr",)
    alpha: float = 0.05


def _replicate_streams(task: _Task, label: str):
    root = RngStream(task.seed, (label, task.spec.kind, repr(float(task.spec.df)), task.replicate))
    return root.child("data"), root.child("fit")


def _mse_task(task: _Task):
    data_rng, fit_rng = _replicate_streams(task, "mse")
    ds = generate(task.spec, data_rng)
    prep = prepare(ds, target_policy(task.spec), task.config, task.options, fit_rng)
    return tail_robust_mean(prep, task.grid).value, classic_dr_mean(prep)


def run_mse_experiment(kind: str = "single", dfs=(1.5, 2.0), replicates: int = 100, n: int = 2500,
                       config: EstimatorConfig | None = None, seed: int = 0, threads: int = 1,
                       grid: QuantileGrid | None = None, options: NuisanceOptions = NuisanceOptions(),
                       name: str | None = None) -> ExperimentReport:
    """MSE of the quantile-average and classical means against the exact mean."""
    config = config or experiment_config()
    grid = grid or QuantileGrid.midpoint(99)
    tasks = [_Task(DgpSpec(kind, float(df), n), r, seed, config, options, grid=grid)
             for df in dfs for r in range(replicates)]
    results = _map(_mse_task, tasks, threads)
    rep = ExperimentReport(
        name or ("table1" if kind == "single" else "table2"),
        ("kind", "df", "replicate", "seed", "method", "estimate", "truth", "sq_error"),
        summary_columns=("kind", "df", "method", "replicates", "mse", "bias", "sd", "reference_mse"),
        settings=_settings(kind=kind, dfs=",".join(map(repr, map(float, dfs))), replicates=replicates,
                           n=n, seed=seed, grid_rule=grid.rule, grid_size=len(grid.levels),
                           estimator=config, gbdt=options.gbdt, mdn=options.mdn),
    )
    for task, (rq, rm) in zip(tasks, results):
        truth = oracle_mean(kind, task.spec.df)
        for method, est in (("Rquantile", rq), ("Rmean", rm)):
            rep.records.append(dict(kind=kind, df=task.spec.df, replicate=task.replicate, seed=seed,
                                    method=method, estimate=est, truth=truth,
                                    sq_error=(est - truth) ** 2))
    for df in dfs:
        for j, method in enumerate(("Rquantile", "Rmean")):
            rows = [r for r in rep.records if r["df"] == float(df) and r["method"] == method]
            est = np.array([r["estimate"] for r in rows])
            err = est - rows[0]["truth"]
            ref = REFERENCE_MSE.get((kind, float(df)))
            rep.summary.append(dict(kind=kind, df=float(df), method=method, replicates=len(rows),
                                    mse=float(np.mean(err ** 2)), bias=float(np.mean(err)),
                                    sd=float(np.std(est, ddof=1)) if len(rows) > 1 else 0.0,
                                    reference_mse=ref[j] if ref else math.nan))
    return rep


def _quantile_task(task: _Task):
    """Per tau and per kernel: ``(eta_hat, sigma2, ci_lo, ci_hi, j0)`` for each method."""
    data_rng, fit_rng = _replicate_streams(task, "quantile")
    ds = generate(task.spec, data_rng)
    prep = prepare(ds, target_policy(task.spec), task.config, task.options, fit_rng)
    out = {}
    for method in task.methods:
        for tau in task.taus:
            eta, fold_etas, _ = point_estimate(prep, tau, method)
            for kernel in task.kernels or (None,):
                if kernel is None:
                    out[(method, tau, None)] = (eta, math.nan, math.nan, math.nan, math.nan)
                    continue
                inf = quantile_inference(prep, tau, eta, fold_etas, method, kernel, task.alpha)
                out[(method, tau, kernel)] = (eta, inf.sigma2, inf.ci[0], inf.ci[1], inf.j0)
    return out


def binomial_band(p: float, reps: int, level: float = 0.99) -> tuple:
    """Central ``level`` envelope of an empirical proportion around ``p``."""
    lo = stats.binom.ppf((1 - level) / 2, reps, p) / reps
    hi = stats.binom.ppf(1 - (1 - level) / 2, reps, p) / reps
    return float(lo), float(hi)


def run_coverage_experiment(taus=(0.25, 0.5, 0.75), replicates: int = 200,
                            spec: DgpSpec = DgpSpec("single", 3.0, 2500), config: EstimatorConfig | None = None,
                            kernel: KernelSpec = KernelSpec(), seed: int = 0, threads: int = 1,
                            alpha: float = 0.05, options: NuisanceOptions = NuisanceOptions()) -> ExperimentReport:
    """Fraction of replicates whose Wald interval covers the oracle quantile."""
    config = config or experiment_config()
    taus = tuple(float(t) for t in taus)
    tasks = [_Task(spec, r, seed, config, options, taus=taus, kernels=(kernel,), alpha=alpha)
             for r in range(replicates)]
    results = _map(_quantile_task, tasks, threads)
    law = oracle_law(spec.kind, float(spec.df))
    rep = ExperimentReport(
        "coverage",
        ("kind", "df", "tau", "replicate", "seed", "estimate", "sigma", "ci_lo", "ci_hi", "j0", "truth", "covered"),
        summary_columns=("kind", "df", "tau", "replicates", "coverage", "band_lo", "band_hi", "truth", "truth_se"),
        settings=_settings(spec=spec, taus=",".join(map(repr, taus)), replicates=replicates, seed=seed,
                           alpha=alpha, kernel=kernel, estimator=config, gbdt=options.gbdt, mdn=options.mdn),
    )
    for task, res in zip(tasks, results):
        for tau in taus:
            eta, s2, lo, hi, j0 = res[("dr", tau, kernel)]
            truth = float(law.quantile(tau))
            rep.records.append(dict(kind=spec.kind, df=spec.df, tau=tau, replicate=task.replicate, seed=seed,
                                    estimate=eta, sigma=math.sqrt(s2), ci_lo=lo, ci_hi=hi, j0=j0, truth=truth,
                                    covered=bool(lo <= truth <= hi)))
    for tau in taus:
        hits = [r["covered"] for r in rep.records if r["tau"] == tau]
        band = binomial_band(1 - alpha, len(hits))
        rep.summary.append(dict(kind=spec.kind, df=spec.df, tau=tau, replicates=len(hits),
                                coverage=float(np.mean(hits)), band_lo=band[0], band_hi=band[1],
                                truth=float(law.quantile(tau)), truth_se=law.quantile_se(tau)))
    return rep


def run_method_comparison(spec: DgpSpec = DgpSpec("single", 4.0, 2500), taus=(0.25, 0.5, 0.75),
                          replicates: int = 50, config: EstimatorConfig | None = None, seed: int = 0,
                          threads: int = 1, options: NuisanceOptions = NuisanceOptions()) -> ExperimentReport:
    """Squared errors of the direct, weighting and doubly-robust estimators."""
    config = config or experiment_config()
    taus = tuple(float(t) for t in taus)
    methods = ("dm", "ipw", "dr")
    tasks = [_Task(spec, r, seed, config, options, taus=taus, methods=methods) for r in range(replicates)]
    results = _map(_quantile_task, tasks, threads)
    law = oracle_law(spec.kind, float(spec.df))
    rep = ExperimentReport(
        "methods",
        ("kind", "df", "tau", "method", "replicate", "seed", "estimate", "truth", "sq_error"),
        summary_columns=("kind", "df", "tau", "method", "replicates", "mse", "log_mse", "median_log_sq_error"),
        settings=_settings(spec=spec, taus=",".join(map(repr, taus)), replicates=replicates, seed=seed,
                           estimator=config, gbdt=options.gbdt, mdn=options.mdn),
    )
    for task, res in zip(tasks, results):
        for tau in taus:
            truth = float(law.quantile(tau))
            for m in methods:
                eta = res[(m, tau, None)][0]
                rep.records.append(dict(kind=spec.kind, df=spec.df, tau=tau, method=m, replicate=task.replicate,
                                        seed=seed, estimate=eta, truth=truth, sq_error=(eta - truth) ** 2))
    for tau in taus:
        for m in methods:
            se = np.array([r["sq_error"] for r in rep.records if r["tau"] == tau and r["method"] == m])
            rep.summary.append(dict(kind=spec.kind, df=spec.df, tau=tau, method=m, replicates=se.size,
                                    mse=float(se.mean()), log_mse=float(np.log(se.mean())),
                                    median_log_sq_error=float(np.median(np.log(np.maximum(se, 1e-300))))))
    return rep


def run_bandwidth_sweep(kernels=(KernelSpec(0.10), KernelSpec(0.15), KernelSpec(0.20), KernelSpec(rule="scott")),
                        spec: DgpSpec = DgpSpec("single", 3.0, 2500), taus=(0.25, 0.5, 0.75),
                        replicates: int = 50, config: EstimatorConfig | None = None, seed: int = 0,
                        threads: int = 1, options: NuisanceOptions = NuisanceOptions(),
                        oversmooth_ratio: float = 1.5) -> ExperimentReport:
    """Accuracy of the estimated standard error for several bandwidths.

    The reference is the replicate standard deviation of the point
    estimates; a bandwidth whose mean standard error is more than
    ``oversmooth_ratio`` times the reference (or less than its inverse) is
    flagged.
    """
    config = config or experiment_config()
    taus = tuple(float(t) for t in taus)
    kernels = tuple(kernels)
    tasks = [_Task(spec, r, seed, config, options, taus=taus, kernels=kernels) for r in range(replicates)]
    results = _map(_quantile_task, tasks, threads)
    rep = ExperimentReport(
        "bandwidth",
        ("kind", "df", "tau", "bandwidth", "replicate", "seed", "estimate", "se"),
        summary_columns=("kind", "df", "tau", "bandwidth", "replicates", "empirical_sd", "mean_se",
                         "mse_se", "flagged"),
        settings=_settings(spec=spec, taus=",".join(map(repr, taus)), replicates=replicates, seed=seed,
                           bandwidths=";".join(_kernel_label(k) for k in kernels), estimator=config,
                           gbdt=options.gbdt, mdn=options.mdn),
    )
    for task, res in zip(tasks, results):
        for tau in taus:
            for kern in kernels:
                eta, s2 = res[("dr", tau, kern)][:2]
                rep.records.append(dict(kind=spec.kind, df=spec.df, tau=tau, bandwidth=_kernel_label(kern),
                                        replicate=task.replicate, seed=seed, estimate=eta,
                                        se=math.sqrt(s2 / spec.n)))
    for tau in taus:
        for kern in kernels:
            rows = [r for r in rep.records if r["tau"] == tau and r["bandwidth"] == _kernel_label(kern)]
            est = np.array([r["estimate"] for r in rows])
            se = np.array([r["se"] for r in rows])
            sd = float(np.std(est, ddof=1)) if est.size > 1 else math.nan
            ratio = float(se.mean()) / sd if sd > 0 else math.nan
            rep.summary.append(dict(kind=spec.kind, df=spec.df, tau=tau, bandwidth=_kernel_label(kern),
                                    replicates=est.size, empirical_sd=sd, mean_se=float(se.mean()),
                                    mse_se=float(np.mean((se - sd) ** 2)),
                                    flagged=bool(ratio > oversmooth_ratio or ratio < 1 / oversmooth_ratio)))
    return rep


def _kernel_label(k: KernelSpec) -> str:
    return "scott" if k.rule == "scott" else repr(float(k.bandwidth))


def fig3_levels(count: int = 20) -> tuple:
    return tuple((np.arange(1, count + 1) - 0.5) / count)


def run_fig3(spec: DgpSpec = DgpSpec("single", 3.0, 2500), taus=None, config: EstimatorConfig | None = None,
             seed: int = 0, options: NuisanceOptions = NuisanceOptions()) -> ExperimentReport:
    """Estimated quantiles at evenly spaced levels against the oracle cdf."""
    config = config or experiment_config()
    taus = tuple(float(t) for t in (taus or fig3_levels()))
    res = _quantile_task(_Task(spec, 0, seed, config, options, taus=taus))
    law = oracle_law(spec.kind, float(spec.df))
    rep = ExperimentReport(
        "fig3", ("kind", "df", "tau", "seed", "estimate", "oracle_cdf", "abs_error", "truth"),
        summary_columns=("kind", "df", "levels", "max_abs_error"),
        settings=_settings(spec=spec, taus=",".join(map(repr, taus)), seed=seed, estimator=config,
                           gbdt=options.gbdt, mdn=options.mdn),
    )
    for tau in taus:
        eta = res[("dr", tau, None)][0]
        F = float(law.cdf(eta))
        rep.records.append(dict(kind=spec.kind, df=spec.df, tau=tau, seed=seed, estimate=eta, oracle_cdf=F,
                                abs_error=abs(F - tau), truth=float(law.quantile(tau))))
    rep.summary.append(dict(kind=spec.kind, df=spec.df, levels=len(taus),
                            max_abs_error=max(r["abs_error"] for r in rep.records)))
    return rep
