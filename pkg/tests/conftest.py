import numpy as np
import pytest

from qope.core import Dataset, FoldAssignment, RngStream, uniform_policy
from qope.mdn import MdnConfig
from qope.quantile import EstimatorConfig, FoldTerms, NuisanceOptions, Prepared

ACCEPTANCE_LINES = []

# small networks keep the end-to-end unit tests quick
FAST_MDN = MdnConfig(hidden=(8,), components=2, epochs=40)
FAST_OPTIONS = NuisanceOptions(mdn=FAST_MDN)


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


def manual_prepared(outcome, ratios, prefix, rollouts, rollout_weights, num_folds=1, policy=None):
    """A single-fold Prepared built directly from per-subject terms."""
    outcome = np.asarray(outcome, dtype=float)
    n = outcome.shape[0]
    K = np.asarray(ratios).shape[1]
    ds = Dataset(tuple(np.zeros((n, 1)) for _ in range(K)), np.zeros((n, K), dtype=int),
                 np.column_stack([outcome] + [np.zeros(n)] * (K - 1)), 2)
    folds = FoldAssignment(np.zeros(n, dtype=np.int64), 1)
    terms = FoldTerms(0, np.arange(n), outcome, np.asarray(ratios, dtype=float),
                      np.asarray(prefix, dtype=float), tuple(np.asarray(r, dtype=float) for r in rollouts),
                      tuple(np.asarray(w, dtype=float) for w in rollout_weights))
    return Prepared(ds, policy or uniform_policy(2), EstimatorConfig(num_folds=2), folds, (), (terms,),
                    NuisanceOptions(), RngStream(0))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
