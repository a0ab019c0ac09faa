from __future__ import annotations

import logging
import math
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd

from errors import InvalidParameters, NeedTwoMethods
from experiments.runner import ExperimentResult

LOGGER = logging.getLogger(__name__)

RANKING_COLUMNS = ['channel', 'rank', 'method', 'median_error', 'ci_low', 'ci_high', 'count']
TIE_DECIMALS = 12

Records = Union[ExperimentResult, pd.DataFrame]


def _records(result: Records) -> pd.DataFrame:
    return result.records if isinstance(result, ExperimentResult) else result


def median_ci(
        errors: np.ndarray,
        resamples: int = 1000,
        confidence: float = 0.9,
        rng: np.random.Generator = None,
) -> Tuple[float, float, float]:
    """Median with a percentile-bootstrap confidence interval."""
    errors = np.asarray(errors, dtype=float)
    errors = errors[np.isfinite(errors)]
    if errors.size == 0:
        return math.nan, math.nan, math.nan
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = rng.integers(0, errors.size, size=(resamples, errors.size))
    medians = np.median(errors[picks], axis=1)
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(medians, [alpha, 1.0 - alpha])
    return float(np.median(errors)), float(low), float(high)


def compare_methods(
        result: Records,
        resamples: int = 1000,
        confidence: float = 0.9,
        seed: int = 0,
) -> pd.DataFrame:
    """Per channel, methods ranked by median absolute error.

    Medians equal to 12 decimals share a rank, so noiseless runs tie at zero.
    """
    if not 0 < confidence < 1:
        raise InvalidParameters(f"confidence must lie in (0, 1), got {confidence}")
    records = _records(result)
    methods = sorted(records['method'].unique())
    if len(methods) < 2:
        raise NeedTwoMethods(f"Ranking needs at least two methods, got {methods}")
    rng = np.random.default_rng(seed)
    rows = []
    for (channel, method), group in records.groupby(['channel', 'method'], sort=True):
        median, low, high = median_ci(group['error'].to_numpy(), resamples, confidence, rng)
        rows.append({'channel': channel, 'method': method, 'median_error': median,
                     'ci_low': low, 'ci_high': high, 'count': int(group['error'].notna().sum())})
    table = pd.DataFrame(rows)
    keys = table['median_error'].round(TIE_DECIMALS)
    table['rank'] = keys.groupby(table['channel']).rank(method='min').astype('Int64')
    table = table.sort_values(['channel', 'rank', 'method'], kind='mergesort').reset_index(drop=True)
    LOGGER.info("Ranked %d methods over %d channels.", len(methods), table['channel'].nunique())
    return table[RANKING_COLUMNS]


def paired_bootstrap(
        result: Records,
        channel: str,
        method_a: str,
        method_b: str,
        resamples: int = 1000,
        confidence: float = 0.9,
        seed: int = 0,
) -> Dict[str, float]:
    """Median error of `method_a` minus that of `method_b`, resampling whole trials.

    `prob_not_worse` is the share of resamples in which `method_a` has the lower or
    equal median error, medians equal to 12 decimals counting as equal.
    """
    records = _records(result)
    subset = records[(records['channel'] == channel) & records['method'].isin([method_a, method_b])]
    paired = subset.pivot_table(index='trial', columns='method', values='error', aggfunc='first')
    for method in (method_a, method_b):
        if method not in paired.columns:
            raise InvalidParameters(f"No '{channel}' records for method '{method}'")
    paired = paired[[method_a, method_b]].dropna()
    if paired.empty:
        raise InvalidParameters(f"No trial has finite '{channel}' errors for both methods")
    a = paired[method_a].to_numpy(dtype=float)
    b = paired[method_b].to_numpy(dtype=float)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, a.size, size=(resamples, a.size))
    diffs = np.median(a[picks], axis=1) - np.median(b[picks], axis=1)
    ties = np.round(diffs, TIE_DECIMALS) == 0.0
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(diffs, [alpha, 1.0 - alpha])
    return {
        'diff': float(np.median(a) - np.median(b)),
        'ci_low': float(low),
        'ci_high': float(high),
        'prob_not_worse': float(np.mean((diffs <= 0.0) | ties)),
        'trials': int(a.size),
    }
