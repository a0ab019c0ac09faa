from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InversionError, NonFiniteEstimate, NonPositiveMeasurement, WidthDegenerate
from sensing.field import SQRT3, GaussianParams, MeasurementQuad
from sensing.lattice import HexNetwork, LocalFrame, local_frame

LOGGER = logging.getLogger(__name__)

# log(mu1^3 / (mu2 mu3 mu4)) below this is treated as a degenerate width.
LOG_GUARD = 1e-12


class InversionFailure(str, Enum):
    NON_POSITIVE_MEASUREMENT = 'non_positive_measurement'
    WIDTH_DEGENERATE = 'width_degenerate'
    NON_FINITE_ESTIMATE = 'non_finite_estimate'


_FAILURE_ERRORS = {
    InversionFailure.NON_POSITIVE_MEASUREMENT: NonPositiveMeasurement,
    InversionFailure.WIDTH_DEGENERATE: WidthDegenerate,
    InversionFailure.NON_FINITE_ESTIMATE: NonFiniteEstimate,
}


@dataclass(frozen=True)
class LocalEstimate:
    node: int
    valid: bool
    params_global: Optional[GaussianParams] = None
    params_local: Optional[GaussianParams] = None
    failure_reason: Optional[InversionFailure] = None
    quad: Optional[MeasurementQuad] = None


def invert_measurement_array(mu: np.ndarray, l: float) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised closed-form inversion of many quads at once.

    Returns the (n, 4) parameter rows in (C1, C2, m1, m2) order and a length-n
    array of failure codes ('' where the inversion succeeded). Failed rows hold NaN.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    n = mu.shape[0]
    params = np.full((n, 4), np.nan)
    reasons = np.full(n, '', dtype=object)

    positive = np.all(mu > 0, axis=1)
    reasons[~positive] = InversionFailure.NON_POSITIVE_MEASUREMENT.value
    logs = np.full_like(mu, np.nan)
    logs[positive] = np.log(mu[positive])
    y1, y2, y3, y4 = logs.T

    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        width_log = 3.0 * y1 - y2 - y3 - y4
        wide = positive & (width_log >= LOG_GUARD)
        reasons[positive & ~wide] = InversionFailure.WIDTH_DEGENERATE.value
        c2 = 3.0 * l * l / width_log
        m1 = c2 / (2.0 * l * SQRT3) * (y4 - y3)
        m2 = c2 / (6.0 * l) * (2.0 * y2 - y3 - y4)
        c1 = mu[:, 0] * np.exp((m1 * m1 + m2 * m2) / c2)
        candidate = np.column_stack([c1, c2, m1, m2])
        finite = wide & np.all(np.isfinite(candidate), axis=1) & (c1 > 0)
    reasons[wide & ~finite] = InversionFailure.NON_FINITE_ESTIMATE.value
    params[finite] = candidate[finite]
    return params, reasons


def invert_measurements(quad: MeasurementQuad) -> GaussianParams:
    """Recover (C1, C2, m1, m2) in the canonical frame from the four measurements."""
    params, reasons = invert_measurement_array(quad.as_array(), quad.l)
    if reasons[0]:
        failure = InversionFailure(reasons[0])
        raise _FAILURE_ERRORS[failure](f"Cannot invert {quad.mu} (l={quad.l}): {failure.value}")
    return GaussianParams.from_array(params[0])


def _value_at(values: Union[Mapping[int, float], Sequence[float], np.ndarray], node: int) -> float:
    try:
        return float(values[node])
    except (KeyError, IndexError) as exc:
        raise KeyError(f"No measurement for node {node}") from exc


def assemble_quad(
        net: HexNetwork,
        frame: LocalFrame,
        values: Union[Mapping[int, float], Sequence[float], np.ndarray],
) -> MeasurementQuad:
    mu = tuple(_value_at(values, n) for n in frame.ordered_nodes())
    return MeasurementQuad(mu, net.l)


def estimate_at_node(
        net: HexNetwork,
        node: int,
        values: Union[Mapping[int, float], Sequence[float], np.ndarray],
        frame: Optional[LocalFrame] = None,
) -> LocalEstimate:
    """Estimate the field at an inner node and express the center in global coordinates.

    Inversion failures are reported through `valid=False` and `failure_reason`;
    NotInnerNode propagates for nodes that cannot estimate at all.
    """
    frame = frame or local_frame(net, node)
    quad = assemble_quad(net, frame, values)
    try:
        local = invert_measurements(quad)
    except InversionError as exc:
        failure = InversionFailure(_code_to_failure(exc))
        LOGGER.debug("Node %d inversion failed: %s", node, failure.value)
        return LocalEstimate(node, False, failure_reason=failure, quad=quad)
    center = frame.to_global(local.center)
    return LocalEstimate(node, True, local.with_center(center), local, None, quad)


def _code_to_failure(exc: InversionError) -> str:
    for failure, error_type in _FAILURE_ERRORS.items():
        if isinstance(exc, error_type):
            return failure.value
    return InversionFailure.NON_FINITE_ESTIMATE.value


def estimate_network(
        net: HexNetwork,
        values: Union[Mapping[int, float], Sequence[float], np.ndarray],
        frames: Optional[Mapping[int, LocalFrame]] = None,
) -> List[LocalEstimate]:
    """Local estimates at every inner node, in `net.inner` order."""
    estimates = []
    for node in net.inner:
        frame = frames.get(node) if frames else None
        estimates.append(estimate_at_node(net, node, values, frame))
    failed = sum(1 for e in estimates if not e.valid)
    if failed:
        LOGGER.debug("%d of %d inner nodes failed to invert.", failed, len(estimates))
    return estimates


def inner_frames(net: HexNetwork) -> dict:
    return {node: local_frame(net, node) for node in net.inner}
