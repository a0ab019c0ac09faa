"""JSON and CSV codecs for networks, per-node estimates, traces and experiment results."""
from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from errors import ConfigError, InvalidParameters
from sensing.lattice import HexNetwork

LOGGER = logging.getLogger(__name__)

ESTIMATE_COLUMNS = [
    'node', 'valid', 'failure_reason', 'mu1', 'c1', 'c2', 'm1', 'm2',
    'var_c1', 'var_c2', 'var_center', 'sigma2',
]

PathLike = Union[str, Path]


def to_jsonable(value: Any) -> Any:
    """Plain-Python copy of `value`; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if value is None or isinstance(value, str):
        return value
    if pd.isna(value):
        return None
    return str(value)


def write_json(path: PathLike, data: Any) -> Path:
    """Write sorted-key JSON through a temporary file, so readers never see a partial document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + '.tmp')
    with tmp_path.open('w', encoding='utf-8') as handle:
        json.dump(to_jsonable(data), handle, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
        handle.write('\n')
    os.replace(tmp_path, path)
    LOGGER.debug("Wrote %s", path)
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open('r', encoding='utf-8') as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"File not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {path}: {exc}") from exc


def save_network(net: HexNetwork, path: PathLike) -> Path:
    return write_json(path, net.to_dict())


def load_network(path: PathLike) -> HexNetwork:
    return HexNetwork.from_dict(read_json(path))


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    LOGGER.debug("Wrote %d rows to %s", len(frame), path)
    return path


def normalize_columns(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.copy()
    frame.columns = frame.columns.str.strip().str.lower()
    return frame


def read_estimates_csv(path: PathLike) -> pd.DataFrame:
    """Per-node estimates table with normalised headers, one row per inner node."""
    try:
        frame = normalize_columns(pd.read_csv(path))
    except FileNotFoundError as exc:
        raise ConfigError(f"File not found: {path}") from exc
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise ConfigError(f"Unreadable estimates file {path}: {exc}") from exc
    missing = [c for c in ESTIMATE_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidParameters(f"Estimates file {path} lacks columns: {', '.join(missing)}")
    frame['valid'] = frame['valid'].astype(str).str.strip().str.lower().isin({'true', '1', 'yes'})
    frame['failure_reason'] = frame['failure_reason'].fillna('').astype(str)
    frame['node'] = frame['node'].astype(int)
    return frame[ESTIMATE_COLUMNS]
