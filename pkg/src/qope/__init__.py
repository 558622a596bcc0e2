"""Quantile off-policy evaluation with doubly-robust estimators.

Typical use::

    from qope import prepare, estimate_quantiles, ThresholdPolicy
    prepared = prepare(dataset, ThresholdPolicy(), rng=0)
    estimates = estimate_quantiles(prepared, [0.25, 0.5, 0.75])
"""
from ._kernels import BACKEND
from .core import (
    CallbackPolicy, ConfigError, ContractError, DataFormatError, Dataset, FoldAssignment,
    HistoryPrefix, Policy, RngStream, StageRecord, TabularPolicy, ThresholdPolicy, Trajectory,
    cumulative_reward, policy_prob, read_dataset_csv, split_folds, uniform_policy, write_dataset_csv,
)
from .inference import KernelSpec, j0_dm, j0_dr, j0_ipw, psi_values, sandwich_variance, wald_ci
from .mdn import MdnConfig, MdnModel, fit_mdn, mdn_cdf, mdn_pdf, mdn_sample, mc_expected_pinball
from .mean import QuantileGrid, classic_dr_mean, evaluate_mean, tail_robust_mean
from .propensity import GbdtConfig, OraclePropensity, PropensityModel, fit_propensity, predict_propensity
from .quantile import (
    EstimatorConfig, NuisanceOptions, QuantileEstimate, dr_objective, estimate_quantiles, pinball,
    prepare, solve_quantile,
)

__version__ = "0.1.0"
