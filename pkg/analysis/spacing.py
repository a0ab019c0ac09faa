from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from analysis.sensitivity import channel_variance
from errors import InvalidParameters, NoFiniteValue
from sensing.field import SQRT3, GaussianParams

LOGGER = logging.getLogger(__name__)

GRID_POINTS = 2000
GRID_LOW = 1e-2
GRID_HIGH = 20.0
ROOT_XTOL = 1e-12

SWEEP_COLUMNS = ['m1', 'm2', 'channel', 'l_opt', 's_at_opt']


class SpacingChannel(str, Enum):
    C1 = 'c1'
    C2 = 'c2'
    MODM = 'modm'
    ANGLE = 'angle'


@dataclass(frozen=True)
class SpacingResult:
    channel: SpacingChannel
    l_opt: float
    s_at_opt: float
    bracket: Tuple[float, float]
    local_minima: Tuple[Tuple[float, float], ...] = ()


def _shape(channel: SpacingChannel, l, params: GaussianParams, printed: bool):
    # sigma^2 and C1 only scale S(l); evaluate at unit values so the argmin cannot depend on them.
    return channel_variance(channel.value, l, params.with_amplitude(1.0), 1.0, printed)


def search_grid(params: GaussianParams, points: int = GRID_POINTS) -> np.ndarray:
    scale = math.sqrt(params.c2) + params.mod_m
    return np.geomspace(GRID_LOW * scale, GRID_HIGH * scale, points)


def _refine(f, grid: np.ndarray, values: np.ndarray, i: int) -> Tuple[float, float]:
    try:
        res = optimize.minimize_scalar(f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method='golden')
    except ValueError:
        # Scalar re-evaluation can differ from the vectorised probe by an ulp and break the bracket.
        return float(grid[i]), float(values[i])
    if np.isfinite(res.fun) and res.fun <= values[i] and grid[i - 1] < res.x < grid[i + 1]:
        return float(res.x), float(res.fun)
    return float(grid[i]), float(values[i])


def minimize_spacing(
        channel: SpacingChannel,
        params: GaussianParams,
        sigma2: float = 1.0,
        grid_points: int = GRID_POINTS,
        printed: bool = False,
) -> SpacingResult:
    """Global minimizer of S(l; channel) over l > 0.

    A log-spaced grid over [1e-2 L, 20 L], L = sqrt(C2) + |m|, is scanned and each
    strict grid-local minimum is refined by golden-section search inside its
    neighboring probes. All local minima are reported, the lowest one wins.
    """
    channel = SpacingChannel(channel)
    if grid_points < 3:
        raise InvalidParameters(f"grid_points must be >= 3, got {grid_points}")
    grid = search_grid(params, grid_points)
    values = np.asarray(_shape(channel, grid, params, printed), dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        raise NoFiniteValue(f"S(l; {channel.value}) is not finite anywhere on the search grid for {params}")

    padded = np.concatenate(([np.inf], np.where(finite, values, np.inf), [np.inf]))
    strict = (padded[1:-1] < padded[:-2]) & (padded[1:-1] < padded[2:])
    indices = set(np.flatnonzero(strict).tolist())
    indices.add(int(np.argmin(np.where(finite, values, np.inf))))

    def f(l: float) -> float:
        value = float(_shape(channel, l, params, printed)) if l > 0 else math.inf
        return value if math.isfinite(value) else math.inf

    minima: List[Tuple[float, float]] = []
    for i in sorted(indices):
        if 0 < i < grid_points - 1 and strict[i]:
            minima.append(_refine(f, grid, values, i))
        else:
            minima.append((float(grid[i]), float(values[i])))
    l_opt, _ = min(minima, key=lambda item: item[1])
    s_at_opt = float(channel_variance(channel.value, l_opt, params, sigma2, printed))
    LOGGER.debug("S(l; %s) has %d local minima on the grid; l_opt=%.8g.", channel.value, len(minima), l_opt)
    reported = tuple(
        (l, float(channel_variance(channel.value, l, params, sigma2, printed))) for l, _ in minima
    )
    return SpacingResult(channel, float(l_opt), s_at_opt, (float(grid[0]), float(grid[-1])), reported)


def canonical_root(c2: float) -> float:
    """Root l > sqrt(C2) of (l^2/C2 - 1) exp(2 l^2 / C2) = 3, the optimal spacing at m = 0."""
    if not c2 > 0:
        raise InvalidParameters(f"C2 must be positive, got {c2}")
    root = math.sqrt(c2)
    return float(optimize.bisect(lambda l: (l * l / c2 - 1.0) * math.exp(2.0 * l * l / c2) - 3.0,
                                 root, 2.0 * root, xtol=ROOT_XTOL * max(root, 1.0)))


def prop2_bounds(c2: float, mod_m: float) -> Tuple[float, float]:
    """Open interval (sqrt(C2) - |m|, sqrt(2 C2) + |m|) that contains l_opt for the C2 channel."""
    if not c2 > 0:
        raise InvalidParameters(f"C2 must be positive, got {c2}")
    if not mod_m >= 0:
        raise InvalidParameters(f"|m| must be >= 0, got {mod_m}")
    root = math.sqrt(c2)
    return root - mod_m, math.sqrt(2.0) * root + mod_m


def _neighbor_projections(m1: float, m2: float) -> Tuple[float, float, float]:
    """Projection of m on the unit directions of the north, southwest and southeast neighbors."""
    return m2, -(SQRT3 * m1 + m2) / 2.0, (SQRT3 * m1 - m2) / 2.0


def c2_spacing_slope(l: float, c2: float, m1: float, m2: float) -> float:
    """dS(l; C2)/dl divided by its positive factor sigma^2 C2^4 e^{2|m|^2/C2} / (9 C1^2)."""
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    total = -9.0
    for proj in _neighbor_projections(m1, m2):
        weight = (l * l - l * proj - c2) / c2
        if weight == 0.0:
            continue
        with np.errstate(over='ignore'):
            total += weight * float(np.exp(2.0 * l * (l - 2.0 * proj) / c2))
    return 4.0 / l ** 5 * total


def refined_lower_bound(c2: float, m1: float, m2: float) -> float:
    """Smallest l at which some neighbor term of the C2 slope turns non-negative.

    Below it every term of `c2_spacing_slope` is negative, so S(l; C2) is still
    decreasing and l_opt cannot lie there.
    """
    if not c2 > 0:
        raise InvalidParameters(f"C2 must be positive, got {c2}")
    roots = [(d + math.sqrt(d * d + 4.0 * c2)) / 2.0 for d in _neighbor_projections(m1, m2)]
    return min(roots)


def sweep_lopt_map(
        channel: SpacingChannel,
        m1_values: Sequence[float],
        m2_values: Sequence[float],
        c2: float,
        sigma2: float = 1.0,
        c1: float = 1.0,
        grid_points: int = GRID_POINTS,
        printed: bool = False,
) -> pd.DataFrame:
    """l_opt over an (m1, m2) grid, one row per point, m1 varying slowest."""
    channel = SpacingChannel(channel)
    if len(m1_values) == 0 or len(m2_values) == 0:
        raise InvalidParameters("Sweep grid must contain at least one point")
    rows = []
    skipped = 0
    for m1 in m1_values:
        for m2 in m2_values:
            params = GaussianParams(c1, c2, float(m1), float(m2))
            try:
                result = minimize_spacing(channel, params, sigma2, grid_points, printed)
                l_opt, s_opt = result.l_opt, result.s_at_opt
            except NoFiniteValue:
                skipped += 1
                l_opt, s_opt = math.nan, math.nan
            rows.append({'m1': float(m1), 'm2': float(m2), 'channel': channel.value,
                         'l_opt': l_opt, 's_at_opt': s_opt})
    if skipped:
        LOGGER.warning("%d sweep points had no finite S(l; %s); recorded as NaN.", skipped, channel.value)
    LOGGER.info("Swept %d points for channel %s.", len(rows), channel.value)
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
