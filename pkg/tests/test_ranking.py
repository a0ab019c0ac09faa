import numpy as np
import pandas as pd
import pytest

from errors import InvalidParameters, NeedTwoMethods
from experiments.ranking import RANKING_COLUMNS, compare_methods, median_ci, paired_bootstrap
from experiments.runner import ExperimentConfig, run_experiment
from sensing.field import GaussianParams


def _records(errors_by_method, channel='center'):
    rows = []
    for method, errors in errors_by_method.items():
        for trial, error in enumerate(errors):
            rows.append({'trial': trial, 'method': method, 'channel': channel, 'estimate': np.nan,
                         'error': error, 'converged': True, 'iterations': 1})
    return pd.DataFrame(rows)


def test_median_ci_brackets_the_median():
    errors = np.random.default_rng(0).exponential(size=200)
    median, low, high = median_ci(errors, rng=np.random.default_rng(1))
    assert median == pytest.approx(np.median(errors))
    assert low <= median <= high


def test_median_ci_of_missing_errors_is_nan():
    median, low, high = median_ci(np.array([np.nan, np.nan]))
    assert np.isnan(median) and np.isnan(low) and np.isnan(high)


def test_ranking_orders_methods_by_median_error():
    rng = np.random.default_rng(3)
    records = _records({'good': rng.uniform(0, 1, 50), 'bad': rng.uniform(5, 6, 50)})
    table = compare_methods(records, resamples=200)
    assert list(table.columns) == RANKING_COLUMNS
    assert list(table['method']) == ['good', 'bad']
    assert list(table['rank']) == [1, 2]
    assert (table['count'] == 50).all()


def test_ranking_needs_two_methods():
    with pytest.raises(NeedTwoMethods):
        compare_methods(_records({'only': [0.1, 0.2]}))


def test_ranking_rejects_bad_confidence():
    with pytest.raises(InvalidParameters):
        compare_methods(_records({'a': [0.1], 'b': [0.2]}), confidence=1.5)


def test_noiseless_methods_tie():
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.0, 0.0), ('average', 'wise', 'optimal'), sigma=0.0, trials=1)
    table = compare_methods(run_experiment(config), resamples=50)
    assert (table['rank'] == 1).all()


def test_paired_bootstrap_prefers_better_method():
    rng = np.random.default_rng(4)
    base = rng.uniform(1, 2, 80)
    records = _records({'sharp': base * 0.5, 'blunt': base})
    comparison = paired_bootstrap(records, 'center', 'sharp', 'blunt', resamples=500)
    assert comparison['diff'] < 0
    assert comparison['ci_high'] < 0
    assert comparison['prob_not_worse'] == 1.0
    assert comparison['trials'] == 80


def test_paired_bootstrap_skips_trials_missing_either_method():
    records = _records({'a': [0.1, np.nan, 0.3], 'b': [0.2, 0.2, np.nan]})
    assert paired_bootstrap(records, 'center', 'a', 'b', resamples=20)['trials'] == 1


def test_paired_bootstrap_unknown_method():
    with pytest.raises(InvalidParameters):
        paired_bootstrap(_records({'a': [0.1], 'b': [0.2]}), 'center', 'a', 'c')


def test_paired_bootstrap_counts_rounding_level_differences_as_ties():
    base = np.random.default_rng(5).uniform(1, 2, 60)
    records = _records({'a': base * (1.0 + 1e-15), 'b': base})
    comparison = paired_bootstrap(records, 'center', 'a', 'b', resamples=200)
    assert comparison['prob_not_worse'] == 1.0
