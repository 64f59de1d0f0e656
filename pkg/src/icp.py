"""Invariant causal prediction over all predictor subsets.

Each subset is fit by pooled least squares with an intercept; residuals of
every environment are compared with those of the remaining environments by a
Welch t-test (means) and a two-sided F-test (variances). The subset p-value is
the Bonferroni-corrected minimum, and the estimate is the intersection of all
accepted subsets.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence, Tuple

import numpy as np
import scipy.stats

from .data import EnvironmentDataset
from .models import IcpResult, SubsetTest

logger = logging.getLogger("icp")

DEFAULT_MAX_PREDICTORS = 20


class IcpError(ValueError):
    """Raised for unsupported targets or too many predictors."""


def all_subsets(n_predictors: int) -> List[Tuple[int, ...]]:
    """Every subset of range(n_predictors), by size then lexicographically."""
    return [
        subset
        for size in range(n_predictors + 1)
        for subset in itertools.combinations(range(n_predictors), size)
    ]


def _t_test(x: np.ndarray, y: np.ndarray) -> float:
    return float(scipy.stats.ttest_ind(x, y, equal_var=False).pvalue)


def _f_test(x: np.ndarray, y: np.ndarray) -> float:
    var_y = np.var(y, ddof=1)
    var_x = np.var(x, ddof=1)
    if var_y == 0.0 and var_x == 0.0:
        return 1.0
    if var_y == 0.0:
        return 0.0
    p = scipy.stats.f.cdf(var_x / var_y, len(x) - 1, len(y) - 1)
    return float(2.0 * min(p, 1.0 - p))


def pooled_residuals(dataset: EnvironmentDataset, subset: Sequence[int]) -> List[np.ndarray]:
    X, y = dataset.pooled()
    design = np.column_stack([np.ones(len(y)), X[:, list(subset)]])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ coef
    bounds = np.cumsum([0] + dataset.sizes)
    return [residuals[bounds[e] : bounds[e + 1]] for e in range(dataset.n_environments)]


def subset_pvalue(dataset: EnvironmentDataset, subset: Sequence[int]) -> float:
    """Bonferroni-combined residual invariance p-value of one subset."""
    n_envs = dataset.n_environments
    if n_envs < 2:
        return 1.0
    residuals = pooled_residuals(dataset, subset)
    smallest = 1.0
    for e in range(n_envs):
        inside = residuals[e]
        outside = np.concatenate([residuals[j] for j in range(n_envs) if j != e])
        smallest = min(smallest, _t_test(inside, outside), _f_test(inside, outside))
    if np.isnan(smallest):
        smallest = 0.0
    return float(min(1.0, 2.0 * n_envs * smallest))


def _predictor_pvalues(
    n_predictors: int, tests: Sequence[SubsetTest], model_rejected: bool
) -> List[float]:
    if model_rejected:
        return [1.0] * n_predictors
    pvalues = []
    for d in range(n_predictors):
        without = [t.p_value for t in tests if d not in t.subset]
        pvalues.append(float(max(without)) if without else 1.0)
    return pvalues


def icp_fit(
    dataset: EnvironmentDataset,
    alpha: float = 0.05,
    max_predictors: int = DEFAULT_MAX_PREDICTORS,
    threads: int = 1,
) -> IcpResult:
    if dataset.target_kind != "continuous":
        raise IcpError("ICP supports continuous targets only")
    if dataset.n_predictors > max_predictors:
        raise IcpError(
            f"ICP would test 2^{dataset.n_predictors} subsets; the limit is {max_predictors} predictors"
        )
    if not 0.0 < alpha < 1.0:
        raise IcpError(f"alpha must be in (0, 1), got {alpha}")

    subsets = all_subsets(dataset.n_predictors)
    if dataset.n_environments < 2:
        logger.warning(
            "Single environment | every subset is trivially invariant | subsets=%d", len(subsets)
        )

    def _test(subset: Tuple[int, ...]) -> SubsetTest:
        p_value = subset_pvalue(dataset, subset)
        logger.debug("Subset tested | subset=%s | p_value=%.4g", subset, p_value)
        return SubsetTest(subset=list(subset), p_value=p_value, accepted=p_value > alpha)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tests = list(pool.map(_test, subsets))
    else:
        tests = [_test(s) for s in subsets]

    accepted = [set(t.subset) for t in tests if t.accepted]
    model_rejected = not accepted
    if model_rejected:
        intersection: List[int] = []
        logger.warning("ICP rejected every subset | alpha=%s | subsets=%d", alpha, len(tests))
    else:
        intersection = sorted(set.intersection(*accepted))

    result = IcpResult(
        alpha=alpha,
        predictor_names=dataset.predictor_names,
        tests=tests,
        intersection=intersection,
        model_rejected=model_rejected,
        predictor_pvalues=_predictor_pvalues(dataset.n_predictors, tests, model_rejected),
    )
    logger.info(
        "ICP finished | subsets=%d | accepted=%d | estimate=%s",
        len(tests),
        len(accepted),
        result.intersection_names(),
    )
    return result
