"""First-order error variances of the four-point inversion.

Three sources are available for the same quantities: the published closed forms
(optionally exactly as printed), a numeric oracle built from the inverse of the
forward-map Jacobian, and seeded Monte Carlo runs of noise plus inversion.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from errors import InvalidParameters, SingularJacobian, TooFewValidSamples
from sensing.estimator import invert_measurement_array
from sensing.field import SQRT3, GaussianParams, NoiseStream, forward_phi, jacobian_phi

LOGGER = logging.getLogger(__name__)

CHANNELS = ('c1', 'c2', 'modm', 'angle')
ORACLE_STEP = 1e-4
ORACLE_STENCIL = 4
MAX_CONDITION = 1e12
MIN_VALID_FRACTION = 0.5

ArrayLike = Union[float, np.ndarray]


class VarianceSource(str, Enum):
    CLOSED_FORM = 'closed-form'
    NUMERIC_ORACLE = 'numeric-oracle'
    MONTE_CARLO = 'monte-carlo'


@dataclass(frozen=True)
class VarianceSet:
    var_c1: float
    var_c2: float
    var_modm: float
    var_angle: float
    source: VarianceSource
    var_m1: Optional[float] = None
    var_m2: Optional[float] = None
    discard_rate: Optional[float] = None
    trials: Optional[int] = None

    def channel(self, name: str) -> float:
        return float(getattr(self, f"var_{name}"))

    def to_dict(self) -> dict:
        data = asdict(self)
        data['source'] = self.source.value
        return data


def _neighbor_exponentials(l: ArrayLike, c2: float, m1: float, m2: float):
    """exp(2 l (l - 2 p.m) / C2) for the north, southwest and southeast neighbors."""
    with np.errstate(over='ignore'):
        e2 = np.exp(2.0 * l * (l - 2.0 * m2) / c2)
        e3 = np.exp(2.0 * l * (l + SQRT3 * m1 + m2) / c2)
        e4 = np.exp(2.0 * l * (l - SQRT3 * m1 + m2) / c2)
    return e2, e3, e4


def _unpack(l: ArrayLike, params: GaussianParams):
    # float64 arithmetic overflows to inf where Python floats would raise.
    c1, c2, m1, m2 = params.as_array()
    return np.asarray(l, dtype=float), c1, c2, m1, m2


def _finite_or_inf(value: ArrayLike) -> ArrayLike:
    arr = np.where(np.isnan(value), np.inf, value)
    return float(arr) if np.ndim(arr) == 0 else arr


def variance_c2(l: ArrayLike, params: GaussianParams, sigma2: float = 1.0, printed: bool = False) -> ArrayLike:
    l, c1, c2, m1, m2 = _unpack(l, params)
    mod2 = m1 * m1 + m2 * m2
    e2, e3, e4 = _neighbor_exponentials(l, c2, m1, m2)
    # As printed, the prefactor exponent uses |m| where every other formula has |m|^2.
    exponent = math.sqrt(mod2) if printed else mod2
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        value = sigma2 * c2 ** 4 * np.exp(2.0 * exponent / c2) / (9.0 * c1 ** 2 * l ** 4) * (9.0 + e2 + e3 + e4)
    return _finite_or_inf(value)


def variance_c1(l: ArrayLike, params: GaussianParams, sigma2: float = 1.0, printed: bool = False) -> ArrayLike:
    l, _, c2, m1, m2 = _unpack(l, params)
    mod2 = m1 * m1 + m2 * m2
    e2, e3, e4 = _neighbor_exponentials(l, c2, m1, m2)
    # As printed the prefactor is 9 / l^4; propagating the inversion gives 1 / (9 l^4).
    scale = 9.0 if printed else 1.0 / 9.0
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        bracket = (
            9.0 * (mod2 - l * l) ** 2
            + (mod2 + 2.0 * l * m2) ** 2 * e2
            + (mod2 - l * (SQRT3 * m1 + m2)) ** 2 * e3
            + (mod2 + l * (SQRT3 * m1 - m2)) ** 2 * e4
        )
        value = sigma2 * scale * np.exp(2.0 * mod2 / c2) / l ** 4 * bracket
    return _finite_or_inf(value)


def variance_modm(l: ArrayLike, params: GaussianParams, sigma2: float = 1.0) -> ArrayLike:
    l, c1, c2, m1, m2 = _unpack(l, params)
    mod2 = m1 * m1 + m2 * m2
    if mod2 == 0.0:
        return np.full(np.shape(l), np.inf) if np.ndim(l) else math.inf
    e2, e3, e4 = _neighbor_exponentials(l, c2, m1, m2)
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        bracket = (
            36.0 * mod2 * mod2
            + (2.0 * mod2 + 2.0 * l * m2) ** 2 * e2
            + (2.0 * mod2 - l * (SQRT3 * m1 + m2)) ** 2 * e3
            + (2.0 * mod2 + l * (SQRT3 * m1 - m2)) ** 2 * e4
        )
        value = sigma2 * c2 ** 2 * np.exp(2.0 * mod2 / c2) / (36.0 * c1 ** 2 * l ** 4 * mod2) * bracket
    return _finite_or_inf(value)


def variance_angle(l: ArrayLike, params: GaussianParams, sigma2: float = 1.0) -> ArrayLike:
    l, c1, c2, m1, m2 = _unpack(l, params)
    mod2 = m1 * m1 + m2 * m2
    if mod2 == 0.0:
        return np.full(np.shape(l), np.inf) if np.ndim(l) else math.inf
    e2, e3, e4 = _neighbor_exponentials(l, c2, m1, m2)
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        bracket = (
            4.0 * m1 * m1 * e2
            + (m1 - SQRT3 * m2) ** 2 * e3
            + (m1 + SQRT3 * m2) ** 2 * e4
        )
        value = sigma2 * c2 ** 2 * np.exp(2.0 * mod2 / c2) / (36.0 * c1 ** 2 * l ** 2 * mod2 * mod2) * bracket
    return _finite_or_inf(value)


def channel_variance(channel: str, l: ArrayLike, params: GaussianParams, sigma2: float = 1.0,
                     printed: bool = False) -> ArrayLike:
    if channel == 'c1':
        return variance_c1(l, params, sigma2, printed)
    if channel == 'c2':
        return variance_c2(l, params, sigma2, printed)
    if channel == 'modm':
        return variance_modm(l, params, sigma2)
    if channel == 'angle':
        return variance_angle(l, params, sigma2)
    raise InvalidParameters(f"Unknown variance channel '{channel}'")


def _check_inputs(l: float, sigma2: float) -> None:
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    if not sigma2 >= 0:
        raise InvalidParameters(f"Noise variance must be >= 0, got {sigma2}")


def closed_form_variances(l: float, params: GaussianParams, sigma2: float, printed: bool = False) -> VarianceSet:
    """Direct evaluation of the published variance formulas.

    `printed=False` (default) applies the two prefactor corrections confirmed by
    the numeric oracle; `printed=True` reproduces the formulas as published.
    """
    _check_inputs(l, sigma2)
    if sigma2 == 0:
        return VarianceSet(0.0, 0.0, 0.0, 0.0, VarianceSource.CLOSED_FORM)
    return VarianceSet(
        var_c1=float(variance_c1(l, params, sigma2, printed)),
        var_c2=float(variance_c2(l, params, sigma2, printed)),
        var_modm=float(variance_modm(l, params, sigma2)),
        var_angle=float(variance_angle(l, params, sigma2)),
        source=VarianceSource.CLOSED_FORM,
    )


def sensitivity_matrix(l: float, params: GaussianParams) -> np.ndarray:
    """(D Phi)^-1: first-order parameter errors per unit measurement error.

    The Jacobian rows span many orders of magnitude, so it is equilibrated by
    rows and columns before inversion and the scaling is undone afterwards.
    """
    jac = jacobian_phi(params, l, step=ORACLE_STEP, stencil=ORACLE_STENCIL)
    row_scale = np.max(np.abs(jac), axis=1)
    if not np.all(np.isfinite(row_scale)) or np.any(row_scale == 0):
        raise SingularJacobian(f"Forward map has vanishing or non-finite rows at {params} (l={l})")
    scaled = jac / row_scale[:, None]
    col_scale = np.max(np.abs(scaled), axis=0)
    if np.any(col_scale == 0):
        raise SingularJacobian(f"Forward map ignores a parameter at {params} (l={l})")
    scaled = scaled / col_scale[None, :]
    condition = np.linalg.cond(scaled)
    if not math.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularJacobian(f"Jacobian condition number {condition:.3g} exceeds {MAX_CONDITION:.0e}")
    return np.linalg.inv(scaled) / col_scale[:, None] / row_scale[None, :]


def polar_gradients(params: GaussianParams):
    """Gradients of |m| and atan2(m2, m1) with respect to (m1, m2); None at the origin."""
    mod = params.mod_m
    if mod == 0.0:
        return None, None
    grad_mod = np.array([params.m1, params.m2]) / mod
    grad_angle = np.array([-params.m2, params.m1]) / (mod * mod)
    return grad_mod, grad_angle


def numeric_oracle_variances(l: float, params: GaussianParams, sigma2: float) -> VarianceSet:
    _check_inputs(l, sigma2)
    inverse = sensitivity_matrix(l, params)
    per_param = sigma2 * np.sum(inverse ** 2, axis=1)
    grad_mod, grad_angle = polar_gradients(params)
    if grad_mod is None:
        var_modm = var_angle = math.inf
    else:
        center_rows = inverse[2:4, :]
        var_modm = float(sigma2 * np.sum((grad_mod @ center_rows) ** 2))
        var_angle = float(sigma2 * np.sum((grad_angle @ center_rows) ** 2))
    return VarianceSet(
        var_c1=float(per_param[0]),
        var_c2=float(per_param[1]),
        var_modm=var_modm,
        var_angle=var_angle,
        source=VarianceSource.NUMERIC_ORACLE,
        var_m1=float(per_param[2]),
        var_m2=float(per_param[3]),
    )


def _wrap_angle(delta: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(delta), np.cos(delta))


def monte_carlo_variances(l: float, params: GaussianParams, sigma: float, trials: int, seed: int = 0) -> VarianceSet:
    """Empirical error variances of noise-plus-inversion around the noiseless inversion.

    Noise is drawn trial by trial, four values per trial in measurement order.
    Failed inversions are discarded and their share reported as `discard_rate`.
    """
    if trials < 1:
        raise InvalidParameters(f"trials must be >= 1, got {trials}")
    _check_inputs(l, sigma * sigma)
    base = forward_phi(params, l).as_array()
    reference, reference_reason = invert_measurement_array(base, l)
    truth = reference[0] if not reference_reason[0] else params.as_array()
    stream = NoiseStream(sigma, seed)
    noisy = base[None, :] + stream.draw(4 * trials).reshape(trials, 4)
    estimates, reasons = invert_measurement_array(noisy, l)
    valid = reasons == ''
    n_valid = int(np.count_nonzero(valid))
    discard_rate = 1.0 - n_valid / trials
    if n_valid < MIN_VALID_FRACTION * trials:
        raise TooFewValidSamples(
            f"Only {n_valid} of {trials} noisy quads inverted (sigma={sigma}, params={params}, l={l})"
        )
    if discard_rate > 0:
        LOGGER.warning("Monte Carlo discarded %.2f%% of %d samples.", 100 * discard_rate, trials)
    good = estimates[valid]
    errors = good - truth[None, :]
    mod_err = np.hypot(good[:, 2], good[:, 3]) - math.hypot(truth[2], truth[3])
    angle_err = _wrap_angle(np.arctan2(good[:, 3], good[:, 2]) - math.atan2(truth[3], truth[2]))
    per_param = np.mean(errors ** 2, axis=0)
    return VarianceSet(
        var_c1=float(per_param[0]),
        var_c2=float(per_param[1]),
        var_modm=float(np.mean(mod_err ** 2)),
        var_angle=float(np.mean(angle_err ** 2)),
        source=VarianceSource.MONTE_CARLO,
        var_m1=float(per_param[2]),
        var_m2=float(per_param[3]),
        discard_rate=discard_rate,
        trials=trials,
    )


def closed_form_discrepancies(
    l: float, params: GaussianParams, sigma2: float = 1.0, rtol: float = 1e-6
) -> pd.DataFrame:
    """Per-channel relative deviation of both closed-form variants from the oracle."""
    oracle = numeric_oracle_variances(l, params, sigma2)
    corrected = closed_form_variances(l, params, sigma2, printed=False)
    printed = closed_form_variances(l, params, sigma2, printed=True)
    rows = []
    for channel in CHANNELS:
        reference = oracle.channel(channel)
        row = {'channel': channel, 'oracle': reference}
        for label, variant in (('corrected', corrected), ('printed', printed)):
            value = variant.channel(channel)
            if math.isinf(reference) and math.isinf(value):
                rel = 0.0
            elif reference == 0.0:
                rel = 0.0 if value == 0.0 else math.inf
            else:
                rel = abs(value - reference) / abs(reference)
            row[label] = value
            row[f"{label}_rel_err"] = rel
            row[f"{label}_agrees"] = bool(rel <= rtol)
        rows.append(row)
    return pd.DataFrame(rows)


def presumed_variances(
    params_local: GaussianParams, l: float, sigma2: float, printed: bool = False
) -> Dict[str, float]:
    """Fusion qualities of one local estimate: C1, C2 and the shared center quality.

    The center quality is S(l;|m|) + |m|^2 S(l;angle), an isotropic combination of
    the radial and tangential variances evaluated in the node's canonical frame.
    """
    variances = closed_form_variances(l, params_local, sigma2, printed)
    mod2 = params_local.m1 ** 2 + params_local.m2 ** 2
    center = variances.var_modm + mod2 * variances.var_angle
    if math.isnan(center):
        center = math.inf
    return {'c1': variances.var_c1, 'c2': variances.var_c2, 'center': center}
