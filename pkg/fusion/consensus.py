"""Distributed fusion of local estimates over the inner-node graph.

Fixed-matrix average consensus, inverse-variance fusion (centralized and as a
pair of consensus runs) and the state-dependent consensus in which every node
carries an estimate x_i together with a presumed variance s_i and weights its
neighbors by 1/s_j (for x) and 1/s_j^2 (for s).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from errors import AllWeightsZero, DisconnectedGraph, InvalidParameters, NotStochastic, SparsityViolation
from sensing.lattice import HexNetwork

LOGGER = logging.getLogger(__name__)

EPS_MIN = 1e-12
CAP_FACTOR = 1e6
STOCHASTIC_ATOL = 1e-12

TRACE_COLUMNS = ['t', 'node', 'channel', 'x', 's']

VarianceFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FusionGraph:
    """Closed neighborhoods N_i (each containing i) of a connected graph on nodes 0..n-1.

    `labels` maps fusion indices back to network node ids when built from a network.
    """

    n: int
    closed_neighborhoods: Tuple[FrozenSet[int], ...]
    labels: Tuple[int, ...] = ()
    _mask: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise InvalidParameters("A fusion graph needs at least one node")
        if len(self.closed_neighborhoods) != self.n:
            raise InvalidParameters(f"Expected {self.n} neighborhoods, got {len(self.closed_neighborhoods)}")
        mask = np.zeros((self.n, self.n), dtype=bool)
        for i, hood in enumerate(self.closed_neighborhoods):
            if i not in hood:
                raise InvalidParameters(f"Node {i} is missing from its own neighborhood")
            for j in hood:
                if not 0 <= j < self.n:
                    raise InvalidParameters(f"Neighborhood of {i} references unknown node {j}")
                mask[i, j] = True
        if not np.array_equal(mask, mask.T):
            raise InvalidParameters("Neighborhood membership must be symmetric")
        if self.n > 1 and not nx.is_connected(nx.from_numpy_array(mask.astype(int))):
            raise DisconnectedGraph(f"Fusion graph with {self.n} nodes is not connected")
        if not self.labels:
            object.__setattr__(self, 'labels', tuple(range(self.n)))
        object.__setattr__(self, '_mask', mask)

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @classmethod
    def from_networkx(cls, graph: nx.Graph) -> 'FusionGraph':
        nodes = sorted(graph.nodes)
        if not nodes:
            raise InvalidParameters("A fusion graph needs at least one node")
        if len(nodes) > 1 and not nx.is_connected(graph):
            raise DisconnectedGraph(f"Graph with {len(nodes)} nodes is not connected")
        index = {node: i for i, node in enumerate(nodes)}
        hoods = tuple(
            frozenset([i] + [index[m] for m in graph.neighbors(node)]) for i, node in enumerate(nodes)
        )
        labels = tuple(int(node) if isinstance(node, (int, np.integer)) else i for i, node in enumerate(nodes))
        return cls(len(nodes), hoods, labels)

    @classmethod
    def from_network(cls, net: HexNetwork) -> 'FusionGraph':
        """Graph induced on the inner nodes, indexed in `net.inner` order."""
        if not net.inner:
            raise InvalidParameters(f"Network '{net.name}' has no inner nodes to fuse")
        index = {node: i for i, node in enumerate(net.inner)}
        hoods = []
        for node in net.inner:
            linked = [index[m] for m in net.neighbors(node) if m in index]
            hoods.append(frozenset([index[node]] + linked))
        return cls(len(net.inner), tuple(hoods), tuple(net.inner))

    @classmethod
    def cycle(cls, n: int) -> 'FusionGraph':
        return cls.from_networkx(nx.cycle_graph(n))

    @classmethod
    def complete(cls, n: int) -> 'FusionGraph':
        return cls.from_networkx(nx.complete_graph(n))


@dataclass(frozen=True, eq=False)
class ConsensusState:
    x: np.ndarray
    s: np.ndarray
    t: int = 0


@dataclass(frozen=True, eq=False)
class FusionReport:
    x_star: Union[float, np.ndarray]
    s_star: float
    iterations: int
    converged: bool
    x: np.ndarray
    s: np.ndarray
    trace: Optional[List[ConsensusState]] = None
    diagnostic: str = ''


def spread(values: np.ndarray) -> float:
    """max - min, taken per column and maximised for (N, k) states."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.max(arr, axis=0) - np.min(arr, axis=0)))


def _as_state(x0: Sequence[float], n: int) -> np.ndarray:
    x = np.array(x0, dtype=float)
    if x.ndim not in (1, 2) or x.shape[0] != n:
        raise InvalidParameters(f"Initial state must have {n} rows, got shape {x.shape}")
    return x


def _consensus_value(x: np.ndarray) -> Union[float, np.ndarray]:
    mean = np.mean(x, axis=0)
    return float(mean) if np.ndim(mean) == 0 else mean


def uniform_weights(graph: FusionGraph) -> np.ndarray:
    """P_ij = 1 / |N_i| for j in N_i."""
    weights = graph.mask.astype(float)
    return weights / weights.sum(axis=1, keepdims=True)


def metropolis_weights(graph: FusionGraph) -> np.ndarray:
    """Symmetric doubly stochastic weights P_ij = 1 / max(|N_i|, |N_j|) off the diagonal."""
    degree = graph.mask.sum(axis=1).astype(float)
    weights = np.where(graph.mask, 1.0 / np.maximum(degree[:, None], degree[None, :]), 0.0)
    np.fill_diagonal(weights, 0.0)
    np.fill_diagonal(weights, 1.0 - weights.sum(axis=1))
    return weights


def check_stochastic(P: np.ndarray, graph: FusionGraph, atol: float = STOCHASTIC_ATOL) -> None:
    P = np.asarray(P, dtype=float)
    if P.shape != (graph.n, graph.n):
        raise NotStochastic(f"Weight matrix shape {P.shape} does not match {graph.n} nodes")
    if np.any(P < -atol):
        raise NotStochastic("Weight matrix has negative entries")
    rows = P.sum(axis=1)
    worst = float(np.max(np.abs(rows - 1.0)))
    if worst > atol:
        raise NotStochastic(f"Weight matrix rows deviate from 1 by up to {worst:.3g}")
    outside = (~graph.mask) & (P != 0.0)
    if np.any(outside):
        i, j = np.argwhere(outside)[0]
        raise SparsityViolation(f"P[{i}, {j}] is nonzero but {j} is not a neighbor of {i}")


def clamp_qualities(s: Sequence[float], eps_min: float = EPS_MIN, cap_factor: float = CAP_FACTOR) -> np.ndarray:
    """Raise qualities below eps_min to eps_min and replace +inf/NaN by cap_factor * max finite quality."""
    arr = np.array(s, dtype=float)
    if np.any(arr < 0):
        raise InvalidParameters("Quality values must be non-negative")
    finite = np.isfinite(arr)
    if not finite.any():
        raise AllWeightsZero("Every quality is infinite; no node carries weight")
    cap = cap_factor * max(float(np.max(arr[finite])), eps_min)
    low = finite & (arr < eps_min)
    if (~finite).any():
        LOGGER.debug("Capped %d infinite qualities at %.3g.", int((~finite).sum()), cap)
    if low.any():
        LOGGER.debug("Raised %d qualities to %.1e.", int(low.sum()), eps_min)
    arr[~finite] = cap
    arr[low] = eps_min
    return arr


def optimal_fusion(x0: Sequence[float], variances: Sequence[float]) -> Union[float, np.ndarray]:
    """Inverse-variance weighted mean; +inf variances get weight zero."""
    x = np.asarray(x0, dtype=float)
    v = np.asarray(variances, dtype=float)
    if v.shape[0] != x.shape[0]:
        raise InvalidParameters(f"{x.shape[0]} estimates but {v.shape[0]} variances")
    if np.any(~(v > 0)):
        raise InvalidParameters("Variances must be positive")
    w = 1.0 / v
    total = w.sum()
    if total == 0:
        raise AllWeightsZero("Every variance is infinite")
    fused = np.tensordot(w, x, axes=(0, 0)) / total
    return float(fused) if np.ndim(fused) == 0 else fused


def _finish(x: np.ndarray, s: np.ndarray, t: int, converged: bool, trace, label: str,
            max_iter: int, s_star: Optional[float] = None) -> FusionReport:
    diagnostic = ''
    if converged:
        LOGGER.debug("%s converged after %d iterations.", label, t)
    else:
        diagnostic = f"max_iter={max_iter} reached with spread(x)={spread(x):.3g}, spread(s)={spread(s):.3g}"
        LOGGER.warning("%s did not converge: %s", label, diagnostic)
    if s_star is None:
        s_star = float(np.mean(s)) if s.size else math.nan
    return FusionReport(_consensus_value(x), s_star, t, converged, x, s, trace, diagnostic)


def average_consensus(
        graph: FusionGraph,
        x0: Sequence[float],
        P: Optional[np.ndarray] = None,
        tol: float = 1e-9,
        max_iter: int = 10_000,
        record_trace: bool = False,
) -> FusionReport:
    """x(t+1) = P x(t) with a fixed row-stochastic P (uniform closed-neighborhood weights by default)."""
    x = _as_state(x0, graph.n)
    P = uniform_weights(graph) if P is None else np.asarray(P, dtype=float)
    check_stochastic(P, graph)
    blank = np.full(graph.n, math.nan)
    trace = [] if record_trace else None
    t = 0
    while True:
        if trace is not None:
            trace.append(ConsensusState(x.copy(), blank, t))
        converged = spread(x) <= tol
        if converged or t >= max_iter:
            break
        x = P @ x
        t += 1
    return _finish(x, blank, t, converged, trace, 'Average consensus', max_iter, math.nan)


def two_channel_fusion(
        graph: FusionGraph,
        x0: Sequence[float],
        variances: Sequence[float],
        tol: float = 1e-9,
        max_iter: int = 10_000,
        record_trace: bool = False,
        P: Optional[np.ndarray] = None,
) -> FusionReport:
    """Average consensus on a = x / var and b = 1 / var; every ratio a_i / b_i tends to the optimal fusion.

    Reported qualities are 1 / (N b_i), each node's view of the fused variance.
    """
    x = _as_state(x0, graph.n)
    v = np.asarray(variances, dtype=float)
    if v.shape != (graph.n,) or np.any(~(v > 0)):
        raise InvalidParameters(f"Need {graph.n} positive variances")
    b = 1.0 / v
    if not b.any():
        raise AllWeightsZero("Every variance is infinite")
    a = x * (b[:, None] if x.ndim == 2 else b)
    P = metropolis_weights(graph) if P is None else np.asarray(P, dtype=float)
    check_stochastic(P, graph)
    s_star = 1.0 / float(b.sum())
    trace = [] if record_trace else None
    t = 0
    while True:
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = a / (b[:, None] if a.ndim == 2 else b)
            quality = 1.0 / (graph.n * b)
        if trace is not None:
            trace.append(ConsensusState(ratio.copy(), quality, t))
        converged = bool(np.all(b > 0)) and spread(ratio) <= tol
        if converged or t >= max_iter:
            break
        a = P @ a
        b = P @ b
        t += 1
    return _finish(ratio, quality, t, converged, trace, 'Two-channel fusion', max_iter, s_star)


def wise_qualities(s0: Sequence[float], n: int, eps_min: float = EPS_MIN) -> np.ndarray:
    """Starting qualities of the state-dependent consensus.

    NaN reads as +inf and values below eps_min are raised to eps_min. +inf is kept:
    such a node lends no weight until its neighbors have overwritten its state.
    """
    arr = np.array(s0, dtype=float)
    if arr.shape != (n,):
        raise InvalidParameters(f"Need {n} qualities, got shape {arr.shape}")
    if np.any(arr < 0):
        raise InvalidParameters("Quality values must be non-negative")
    arr[np.isnan(arr)] = math.inf
    finite = np.isfinite(arr)
    if not finite.any():
        raise AllWeightsZero("Every quality is infinite; no node carries weight")
    arr[finite & (arr < eps_min)] = eps_min
    return arr


def _row_normalise(weights: np.ndarray) -> np.ndarray:
    totals = weights.sum(axis=1)
    idle = np.flatnonzero(totals == 0)
    if idle.size:
        # Nobody in the neighborhood carries weight yet: the node holds its state.
        weights = weights.copy()
        weights[idle, idle] = 1.0
        totals[idle] = 1.0
    return weights / totals[:, None]


def wise_matrices(graph: FusionGraph, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """P_ij proportional to 1/s_j and M_ij proportional to 1/s_j^2, both over N_i and row-normalised.

    Entries with s_j = +inf get weight zero; a row with no weighted neighbor is the identity row.
    """
    s = np.asarray(s, dtype=float)
    inverse = np.zeros_like(s)
    finite = np.isfinite(s)
    inverse[finite] = 1.0 / s[finite]
    P = _row_normalise(np.where(graph.mask, inverse[None, :], 0.0))
    M = _row_normalise(np.where(graph.mask, (inverse * inverse)[None, :], 0.0))
    return P, M


def _mix_qualities(M: np.ndarray, s: np.ndarray) -> np.ndarray:
    if np.all(np.isfinite(s)):
        return M @ s
    with np.errstate(invalid='ignore'):
        return np.where(M > 0, M * s[None, :], 0.0).sum(axis=1)


def _adopt_neighbors(P: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """x with every node of infinite quality replaced by its P-weighted neighborhood mean."""
    pending = ~np.isfinite(s)
    if not pending.any():
        return x
    x = x.copy()
    x[pending] = (P @ x)[pending]
    return x


def wise_step(state: ConsensusState, graph: FusionGraph) -> ConsensusState:
    P, M = wise_matrices(graph, state.s)
    return ConsensusState(P @ state.x, _mix_qualities(M, state.s), state.t + 1)


def _wise_converged(state: ConsensusState, tol: float, s_rtol: float) -> bool:
    if not np.all(np.isfinite(state.s)):
        return False
    return spread(state.x) <= tol and spread(state.s) <= s_rtol * float(np.max(state.s))


def run_wise(
        graph: FusionGraph,
        x0: Sequence[float],
        s0: Sequence[float],
        tol: float = 1e-9,
        s_rtol: float = 1e-6,
        max_iter: int = 10_000,
        record_trace: bool = False,
) -> FusionReport:
    """Iterate the joint (x, s) update until both vectors agree across nodes.

    x may be (N,) or (N, k); all columns share the node qualities s.
    """
    x = _as_state(x0, graph.n)
    state = ConsensusState(x, wise_qualities(s0, graph.n), 0)
    trace = [] if record_trace else None
    while True:
        if trace is not None:
            trace.append(state)
        converged = _wise_converged(state, tol, s_rtol)
        if converged or state.t >= max_iter:
            break
        state = wise_step(state, graph)
    return _finish(state.x, state.s, state.t, converged, trace, 'Wise consensus', max_iter)


def _evaluate_qualities(variance_fn: VarianceFn, x: np.ndarray, n: int) -> np.ndarray:
    s = np.asarray(variance_fn(x), dtype=float).reshape(-1)
    if s.shape != (n,):
        raise InvalidParameters(f"variance_fn returned shape {s.shape}, expected ({n},)")
    return np.where(np.isnan(s), np.inf, s)


def variant_recompute(
        graph: FusionGraph,
        x0: Sequence[float],
        variance_fn: VarianceFn,
        tol: float = 1e-9,
        max_iter: int = 10_000,
        record_trace: bool = False,
) -> FusionReport:
    """Recompute s_i(t) = variance_fn(x(t)) each step and update x with the matching P(t).

    Nodes for which variance_fn has no finite answer carry the quality mixed in
    from their neighbors by M(t-1), as in `run_wise`.
    """
    x = _as_state(x0, graph.n)
    trace = [] if record_trace else None
    t = 0
    carried = np.full(graph.n, math.inf)
    while True:
        raw = _evaluate_qualities(variance_fn, x, graph.n)
        merged = np.where(np.isfinite(raw), raw, carried)
        if not np.isfinite(merged).any():
            diagnostic = f"variance_fn returned no finite quality at t={t}; every node would carry zero weight"
            LOGGER.warning("Recompute variant stopped: %s", diagnostic)
            return FusionReport(_consensus_value(x), math.inf, t, False, x, raw, trace, diagnostic)
        s = wise_qualities(merged, graph.n)
        if trace is not None:
            trace.append(ConsensusState(x.copy(), s, t))
        converged = spread(x) <= tol
        if converged or t >= max_iter:
            break
        P, M = wise_matrices(graph, s)
        x = P @ x
        carried = _mix_qualities(M, s)
        t += 1
    return _finish(x, s, t, converged, trace, 'Recompute variant', max_iter)


def variant_hybrid(
        graph: FusionGraph,
        x0: Sequence[float],
        s0: Sequence[float],
        k_bar: int,
        tol: float = 1e-9,
        s_rtol: float = 1e-6,
        max_iter: int = 10_000,
        record_trace: bool = False,
        variance_fn: Optional[VarianceFn] = None,
) -> FusionReport:
    """Each outer step runs k_bar consensus steps on s alone, then one joint (x, s) step.

    A node of infinite quality takes its neighbors' weighted x in the same inner
    step that gives it a finite s, so its starting x never carries weight.
    With `variance_fn`, s is first refreshed from the current x at every outer step.
    k_bar=0 without `variance_fn` reproduces `run_wise`.
    """
    if k_bar < 0:
        raise InvalidParameters(f"k_bar must be >= 0, got {k_bar}")
    x = _as_state(x0, graph.n)
    state = ConsensusState(x, wise_qualities(s0, graph.n), 0)
    trace = [] if record_trace else None
    while True:
        if trace is not None:
            trace.append(state)
        converged = _wise_converged(state, tol, s_rtol)
        if converged or state.t >= max_iter:
            break
        x, s = state.x, state.s
        if variance_fn is not None:
            raw = _evaluate_qualities(variance_fn, x, graph.n)
            s = wise_qualities(np.where(np.isfinite(raw), raw, s), graph.n)
        for _ in range(k_bar):
            P, M = wise_matrices(graph, s)
            x = _adopt_neighbors(P, x, s)
            s = _mix_qualities(M, s)
        state = wise_step(ConsensusState(x, s, state.t), graph)
    return _finish(state.x, state.s, state.t, converged, trace, f"Hybrid variant (k={k_bar})", max_iter)


def trace_frame(
        report: FusionReport,
        channels: Optional[Iterable[str]] = None,
        node_labels: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """Long-form trace: one row per (t, node, channel)."""
    if not report.trace:
        return pd.DataFrame(columns=TRACE_COLUMNS)
    first = report.trace[0].x
    width = 1 if first.ndim == 1 else first.shape[1]
    names = list(channels) if channels is not None else (['x'] if width == 1 else [f"x{k}" for k in range(width)])
    if len(names) != width:
        raise InvalidParameters(f"{len(names)} channel names for a state with {width} columns")
    labels = list(node_labels) if node_labels is not None else list(range(first.shape[0]))
    frames = []
    for state in report.trace:
        values = state.x.reshape(len(labels), width)
        for k, name in enumerate(names):
            frames.append(pd.DataFrame({
                't': state.t,
                'node': labels,
                'channel': name,
                'x': values[:, k],
                's': state.s,
            }))
    return pd.concat(frames, ignore_index=True)[TRACE_COLUMNS]
