import math

import numpy as np
import pandas as pd
import pytest

from errors import ConfigError
from experiments.ranking import paired_bootstrap
from experiments.records import read_json
from experiments.runner import (
    AGGREGATE_COLUMNS,
    RECORD_COLUMNS,
    ChannelInput,
    ExperimentConfig,
    aggregate,
    canonical_method,
    channel_inputs,
    estimates_frame,
    fuse_channel,
    parse_method,
    records_from_json,
    run_experiment,
    trial_seed,
)
from fusion.consensus import FusionGraph
from sensing.estimator import estimate_network
from sensing.field import GaussianParams, evaluate
from sensing.lattice import preset_twelve_node_network

DEFAULTS = {
    'consensus': {'tol': 1e-9, 's_rtol': 1e-6, 'max_iter': 10_000, 'record_trace': False},
    'noise': {'variance_frac': 0.01, 'reading': 'peak'},
    'experiment': {'seed': 0, 'trials': 100},
    'ranking': {'resamples': 1000, 'confidence': 0.9},
    'spacing': {'grid_points': 2000},
    'sensitivity': {'closed_form': 'corrected'},
}

ALL_METHODS = ('raw', 'average', 'two-channel', 'wise', 'recompute', 'hybrid:2', 'optimal')


def test_parse_method_variants():
    assert parse_method('Wise') == ('wise', 0)
    assert parse_method('hybrid:5') == ('hybrid', 5)
    assert parse_method('variant-recompute') == ('recompute', 0)
    assert canonical_method('variant-hybrid:3') == 'hybrid:3'
    for bad in ('median', 'hybrid:x', 'hybrid:-1'):
        with pytest.raises(ConfigError):
            parse_method(bad)


def test_trial_seeds_are_independent_of_trial_count():
    a = np.random.default_rng(trial_seed(7, 3)).random(4)
    b = np.random.default_rng(trial_seed(7, 3)).random(4)
    c = np.random.default_rng(trial_seed(7, 4)).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_config_validation():
    truth = GaussianParams(1, 1, 0, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig(truth, ('wise',), trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(truth, ())
    with pytest.raises(ConfigError):
        ExperimentConfig(truth, ('wise', 'Wise'))
    with pytest.raises(ConfigError):
        ExperimentConfig(truth, ('wise',), noise_reading='rms')


@pytest.mark.parametrize('reading,expected', [('peak', 0.2), ('peak-squared', 0.4)])
def test_noise_sigma_from_variance_fraction(reading, expected):
    config = ExperimentConfig(GaussianParams(4.0, 1, 0, 0), ('wise',), variance_frac=0.01, noise_reading=reading)
    assert config.noise_sigma == pytest.approx(expected)
    assert ExperimentConfig(GaussianParams(4.0, 1, 0, 0), ('wise',), sigma=0.05).noise_sigma == 0.05


def test_config_from_document_uses_defaults(tmp_path):
    path = tmp_path / 'experiment.json'
    path.write_text('{"truth": {"c1": 1, "c2": 2, "m1": 0.5, "m2": 0}, "methods": ["Wise", "hybrid:4"]}')
    config = ExperimentConfig.load(path, DEFAULTS)
    assert config.truth == GaussianParams(1.0, 2.0, 0.5, 0.0)
    assert config.methods == ('wise', 'hybrid:4')
    assert config.preset == 'paper12'
    assert config.trials == 100
    assert config.noise_reading == 'peak'
    restored = ExperimentConfig.from_dict(config.to_dict(), DEFAULTS)
    assert restored == config


def test_config_document_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'methods': ['wise']}, DEFAULTS)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'truth': '1,1,0,0', 'trials': 'many'}, DEFAULTS)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / 'missing.json', DEFAULTS)


def test_channel_inputs_use_placeholders_for_invalid_nodes():
    net = preset_twelve_node_network(1.0)
    values = np.asarray(evaluate(GaussianParams(1.0, 1.0, 0.0, 0.0), net.nodes), dtype=float)
    broken = net.inner[2]
    values[broken] = -0.5
    table = estimates_frame(estimate_network(net, values), 0.01, net.l)
    inputs = channel_inputs(table, net)
    assert not inputs['c1'].valid[2]
    assert inputs['c1'].x[2] == -0.5
    assert inputs['c2'].x[2] == 1.0
    np.testing.assert_array_equal(inputs['center'].x[2], net.nodes[broken])
    for name in ('c1', 'c2', 'center'):
        assert math.isinf(inputs[name].s[2])
        assert np.all(np.isfinite(inputs[name].s[inputs[name].valid]))


def test_quality_function_matches_table_at_initial_state():
    net = preset_twelve_node_network(1.0)
    values = np.asarray(evaluate(GaussianParams(1.0, 1.0, 0.3, 0.2), net.nodes), dtype=float)
    table = estimates_frame(estimate_network(net, values), 0.01, net.l)
    for name, channel in channel_inputs(table, net).items():
        np.testing.assert_allclose(channel.variance_fn(channel.x), channel.s, rtol=1e-9)


def test_noiseless_experiment_recovers_truth():
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.0, 0.0), ALL_METHODS, sigma=0.0, trials=1)
    result = run_experiment(config)
    assert list(result.records.columns) == RECORD_COLUMNS
    assert result.discards['invalid'] == 0
    assert len(result.records) == len(ALL_METHODS) * 5
    assert result.records['error'].max() <= 1e-9
    assert set(result.records['method']) == set(ALL_METHODS)
    distributed = result.records[~result.records['method'].isin(['raw', 'optimal'])]
    assert distributed['converged'].all()


def test_experiment_is_deterministic(tmp_path):
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.5, 0.5), ('raw', 'average', 'wise'), trials=3, seed=11)
    first = run_experiment(config).save(tmp_path / 'a.json')
    second = run_experiment(config).save(tmp_path / 'b.json')
    assert first.read_bytes() == second.read_bytes()
    assert not (tmp_path / 'a.json.tmp').exists()


def test_seed_changes_noise_but_not_network():
    truth = GaussianParams(1.0, 1.0, 0.5, 0.5)
    a = run_experiment(ExperimentConfig(truth, ('wise',), trials=1, seed=1))
    b = run_experiment(ExperimentConfig(truth, ('wise',), trials=1, seed=2))
    assert list(a.node_estimates['node']) == list(b.node_estimates['node'])
    assert not np.allclose(a.node_estimates['c1'], b.node_estimates['c1'], equal_nan=True)


def test_saved_records_reaggregate_identically(tmp_path):
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 1.0, 1.0), ('raw', 'average', 'wise'), trials=4, seed=5)
    result = run_experiment(config)
    path = result.save(tmp_path / 'result.json')
    data = read_json(path)
    again = aggregate(records_from_json(data))
    pd.testing.assert_frame_equal(again, result.aggregates)
    assert list(again.columns) == AGGREGATE_COLUMNS
    assert (again['trials'] == 4).all()


def test_aggregate_of_empty_records():
    assert list(aggregate(pd.DataFrame(columns=RECORD_COLUMNS)).columns) == AGGREGATE_COLUMNS


def test_summary_counts_trials(capsys):
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.0, 0.0), ('raw', 'wise'), sigma=0.0, trials=2)
    result = run_experiment(config)
    assert result.summary['wise']['trials'] == 2
    assert result.summary['wise']['fused'] == 2
    assert result.summary['wise']['failed'] == 0
    result.print_summary()
    out = capsys.readouterr().out
    assert '- wise: trials=2, fused=2, failed=0, not_converged=0' in out


@pytest.mark.parametrize('center', [(0.5, 0.5), (1.0, 1.0), (1.5, 1.5)])
def test_wise_beats_plain_average_for_off_center_fields(center):
    truth = GaussianParams(1.0, 1.0, *center)
    config = ExperimentConfig(truth, ('raw', 'average', 'wise'), variance_frac=0.01, trials=100, seed=0)
    result = run_experiment(config)
    comparison = paired_bootstrap(result, 'center', 'wise', 'average', resamples=1000, seed=0)
    assert comparison['prob_not_worse'] >= 0.9


def test_overflowing_qualities_do_not_stop_the_experiment():
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.0, 0.0), ('average', 'wise'),
                              variance_frac=0.01, trials=100, seed=3)
    result = run_experiment(config)
    assert result.summary['wise']['trials'] == 100
    assert set(result.records['trial']) == set(range(100))


def test_single_valid_node_gives_its_estimate_to_every_method():
    graph = FusionGraph.from_network(preset_twelve_node_network(1.0))
    valid = np.array([False, False, True, False, False, False])
    x = np.where(valid, 0.7, -3.0)
    s = np.where(valid, 0.05, math.inf)
    channel = ChannelInput('c1', x, s, valid)
    for method in ('average', 'wise', 'hybrid:3'):
        report = fuse_channel(method, graph, channel)
        assert report.converged, method
        assert report.x_star == pytest.approx(0.7, abs=1e-12), method


def test_recompute_converges_on_the_preset_network():
    config = ExperimentConfig(GaussianParams(1.0, 1.0, 0.5, 0.5), ('recompute',),
                              variance_frac=0.01, trials=10, seed=0)
    result = run_experiment(config)
    assert result.summary['recompute']['not_converged'] == 0
