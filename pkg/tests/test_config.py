import pytest

import config

ENV_NAMES = [
    'HEXFIELD_LOG_LEVEL', 'HEXFIELD_TOL', 'HEXFIELD_S_RTOL', 'HEXFIELD_MAX_ITER', 'HEXFIELD_RECORD_TRACE',
    'HEXFIELD_NOISE_VARIANCE_FRAC', 'HEXFIELD_NOISE_READING', 'HEXFIELD_SEED', 'HEXFIELD_TRIALS',
    'HEXFIELD_BOOTSTRAP_RESAMPLES', 'HEXFIELD_CONFIDENCE', 'HEXFIELD_GRID_POINTS', 'HEXFIELD_CLOSED_FORM',
]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.setattr(config, 'load_dotenv', lambda *args, **kwargs: False)
    for name in ENV_NAMES:
        monkeypatch.delenv(name, raising=False)


def test_defaults():
    cfg = config.load_config()
    assert cfg['logging']['level'] == 'INFO'
    assert cfg['consensus'] == {'tol': 1e-9, 's_rtol': 1e-6, 'max_iter': 10_000, 'record_trace': False}
    assert cfg['noise'] == {'variance_frac': 0.01, 'reading': 'peak'}
    assert cfg['experiment'] == {'seed': 0, 'trials': 100}
    assert cfg['sensitivity']['closed_form'] == 'corrected'


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv('HEXFIELD_LOG_LEVEL', 'debug')
    monkeypatch.setenv('HEXFIELD_TOL', '1e-6')
    monkeypatch.setenv('HEXFIELD_RECORD_TRACE', 'yes')
    monkeypatch.setenv('HEXFIELD_NOISE_READING', 'Peak-Squared')
    monkeypatch.setenv('HEXFIELD_TRIALS', '25')
    monkeypatch.setenv('HEXFIELD_CLOSED_FORM', 'printed')
    cfg = config.load_config()
    assert cfg['logging']['level'] == 'DEBUG'
    assert cfg['consensus']['tol'] == 1e-6
    assert cfg['consensus']['record_trace'] is True
    assert cfg['noise']['reading'] == 'peak-squared'
    assert cfg['experiment']['trials'] == 25
    assert cfg['sensitivity']['closed_form'] == 'printed'


def test_unknown_choices_fall_back(monkeypatch):
    monkeypatch.setenv('HEXFIELD_NOISE_READING', 'rms')
    monkeypatch.setenv('HEXFIELD_CLOSED_FORM', 'typo')
    monkeypatch.setenv('HEXFIELD_GRID_POINTS', '  ')
    cfg = config.load_config()
    assert cfg['noise']['reading'] == 'peak'
    assert cfg['sensitivity']['closed_form'] == 'corrected'
    assert cfg['spacing']['grid_points'] == 2000
