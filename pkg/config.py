# Configuration loader for environment variables
import os

from dotenv import load_dotenv

NOISE_READINGS = ('peak', 'peak-squared')
CLOSED_FORM_VARIANTS = ('corrected', 'printed')


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {'1', 'true', 'yes', 'on'}


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name, '')
    return float(raw) if raw.strip() else default


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, '')
    return int(raw) if raw.strip() else default


def _env_choice(name: str, default: str, choices) -> str:
    raw = (os.getenv(name) or default).strip().lower()
    return raw if raw in choices else default


def load_config() -> dict:
    load_dotenv()
    return {
        'logging': {
            'level': (os.getenv('HEXFIELD_LOG_LEVEL') or 'INFO').upper(),
        },
        'consensus': {
            'tol': _env_float('HEXFIELD_TOL', 1e-9),
            's_rtol': _env_float('HEXFIELD_S_RTOL', 1e-6),
            'max_iter': _env_int('HEXFIELD_MAX_ITER', 10_000),
            'record_trace': _env_bool('HEXFIELD_RECORD_TRACE', False),
        },
        'noise': {
            'variance_frac': _env_float('HEXFIELD_NOISE_VARIANCE_FRAC', 0.01),
            'reading': _env_choice('HEXFIELD_NOISE_READING', 'peak', NOISE_READINGS),
        },
        'experiment': {
            'seed': _env_int('HEXFIELD_SEED', 0),
            'trials': _env_int('HEXFIELD_TRIALS', 100),
        },
        'ranking': {
            'resamples': _env_int('HEXFIELD_BOOTSTRAP_RESAMPLES', 1000),
            'confidence': _env_float('HEXFIELD_CONFIDENCE', 0.9),
        },
        'spacing': {
            'grid_points': _env_int('HEXFIELD_GRID_POINTS', 2000),
        },
        'sensitivity': {
            'closed_form': _env_choice('HEXFIELD_CLOSED_FORM', 'corrected', CLOSED_FORM_VARIANTS),
        },
    }
