from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from analysis.sensitivity import presumed_variances, variance_c1, variance_c2
from config import CLOSED_FORM_VARIANTS, NOISE_READINGS, load_config
from errors import ConfigError, HexFieldError, InvalidParameters
from experiments.records import read_json, write_json
from fusion.consensus import (
    FusionGraph,
    FusionReport,
    clamp_qualities,
    optimal_fusion,
    run_wise,
    two_channel_fusion,
    variant_hybrid,
    variant_recompute,
)
from sensing.estimator import LocalEstimate, estimate_network, inner_frames
from sensing.field import GaussianParams, NoiseStream, evaluate, perturb_values
from sensing.lattice import HexNetwork, LocalFrame, build_network

LOGGER = logging.getLogger(__name__)

BASE_METHODS = ('raw', 'average', 'two-channel', 'wise', 'recompute', 'optimal')
FUSION_CHANNELS = ('c1', 'c2', 'center')
RECORD_COLUMNS = ['trial', 'method', 'channel', 'estimate', 'error', 'converged', 'iterations']
NODE_COLUMNS = ['trial', 'node', 'valid', 'failure_reason', 'c1', 'c2', 'm1', 'm2']
AGGREGATE_COLUMNS = ['method', 'channel', 'median_error', 'mean_error', 'count', 'trials']

_METHOD_ALIASES = {
    'variant-recompute': 'recompute',
    'two_channel': 'two-channel',
    'twochannel': 'two-channel',
}


def parse_method(name: str) -> Tuple[str, int]:
    """Split 'hybrid:K' into ('hybrid', K); other methods carry k = 0."""
    text = str(name).strip().lower()
    text = _METHOD_ALIASES.get(text, text)
    for prefix in ('hybrid:', 'variant-hybrid:'):
        if text.startswith(prefix):
            raw = text[len(prefix):]
            try:
                k_bar = int(raw)
            except ValueError as exc:
                raise ConfigError(f"Hybrid method needs an integer step count, got '{name}'") from exc
            if k_bar < 0:
                raise ConfigError(f"Hybrid step count must be >= 0, got {k_bar}")
            return 'hybrid', k_bar
    if text not in BASE_METHODS:
        raise ConfigError(f"Unknown fusion method '{name}'")
    return text, 0


def canonical_method(name: str) -> str:
    kind, k_bar = parse_method(name)
    return f"hybrid:{k_bar}" if kind == 'hybrid' else kind


def trial_seed(seed: int, trial: int) -> np.random.SeedSequence:
    """Seed of trial `trial`: SeedSequence(entropy=seed, spawn_key=(trial,))."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(trial,))


@dataclass(frozen=True)
class ExperimentConfig:
    truth: GaussianParams
    methods: Tuple[str, ...]
    preset: Optional[str] = 'paper12'
    rings: int = 1
    l: float = 1.0
    sigma: Optional[float] = None
    variance_frac: float = 0.01
    noise_reading: str = 'peak'
    trials: int = 100
    seed: int = 0
    tol: float = 1e-9
    s_rtol: float = 1e-6
    max_iter: int = 10_000
    closed_form: str = 'corrected'

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not self.methods:
            raise ConfigError("At least one fusion method is required")
        object.__setattr__(self, 'methods', tuple(canonical_method(m) for m in self.methods))
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"Duplicate fusion methods in {list(self.methods)}")
        if self.sigma is not None and not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ConfigError(f"Noise sigma must be finite and >= 0, got {self.sigma}")
        if not self.variance_frac >= 0:
            raise ConfigError(f"Noise variance fraction must be >= 0, got {self.variance_frac}")
        if self.noise_reading not in NOISE_READINGS:
            raise ConfigError(f"Noise reading must be one of {NOISE_READINGS}, got '{self.noise_reading}'")
        if self.closed_form not in CLOSED_FORM_VARIANTS:
            raise ConfigError(f"closed_form must be one of {CLOSED_FORM_VARIANTS}, got '{self.closed_form}'")
        if not self.l > 0:
            raise ConfigError(f"Edge length must be positive, got {self.l}")
        if self.tol <= 0 or self.s_rtol <= 0 or self.max_iter < 0:
            raise ConfigError("tol and s_rtol must be positive and max_iter non-negative")

    @property
    def noise_sigma(self) -> float:
        """Noise std: `sigma` when given, else from the variance fraction of the peak C1."""
        if self.sigma is not None:
            return float(self.sigma)
        if self.noise_reading == 'peak':
            return math.sqrt(self.variance_frac * self.truth.c1)
        return math.sqrt(self.variance_frac) * self.truth.c1

    @property
    def printed(self) -> bool:
        return self.closed_form == 'printed'

    def network(self) -> HexNetwork:
        return build_network(self.preset, self.rings, self.l)

    def to_dict(self) -> dict:
        network = {'preset': self.preset, 'l': self.l} if self.preset else {'rings': self.rings, 'l': self.l}
        noise = {'sigma': self.sigma} if self.sigma is not None else {
            'variance_frac': self.variance_frac, 'reading': self.noise_reading,
        }
        return {
            'network': network,
            'truth': [self.truth.c1, self.truth.c2, self.truth.m1, self.truth.m2],
            'noise': noise,
            'methods': list(self.methods),
            'trials': self.trials,
            'seed': self.seed,
            'tol': self.tol,
            's_rtol': self.s_rtol,
            'max_iter': self.max_iter,
            'closed_form': self.closed_form,
        }

    @classmethod
    def from_dict(cls, data: Mapping, defaults: Optional[dict] = None) -> 'ExperimentConfig':
        """Build from the JSON document; fields it omits fall back to the environment configuration."""
        config = defaults or load_config()
        try:
            network = dict(data.get('network') or {})
            noise = dict(data.get('noise') or {})
            truth_raw = data['truth']
            if isinstance(truth_raw, Mapping):
                truth = GaussianParams(*(float(truth_raw[k]) for k in ('c1', 'c2', 'm1', 'm2')))
            elif isinstance(truth_raw, str):
                truth = GaussianParams.parse(truth_raw)
            else:
                truth = GaussianParams.from_array(truth_raw)
            preset = network.get('preset')
            if preset is None and 'rings' not in network:
                preset = 'paper12'
            sigma = noise.get('sigma')
            return cls(
                truth=truth,
                methods=tuple(data.get('methods') or ('raw', 'average', 'wise')),
                preset=preset,
                rings=int(network.get('rings', 1)),
                l=float(network.get('l', 1.0)),
                sigma=None if sigma is None else float(sigma),
                variance_frac=float(noise.get('variance_frac', config['noise']['variance_frac'])),
                noise_reading=str(noise.get('reading', config['noise']['reading'])),
                trials=int(data.get('trials', config['experiment']['trials'])),
                seed=int(data.get('seed', config['experiment']['seed'])),
                tol=float(data.get('tol', config['consensus']['tol'])),
                s_rtol=float(data.get('s_rtol', config['consensus']['s_rtol'])),
                max_iter=int(data.get('max_iter', config['consensus']['max_iter'])),
                closed_form=str(data.get('closed_form', config['sensitivity']['closed_form'])),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid experiment configuration: {exc}") from exc

    @classmethod
    def load(cls, path: Union[str, Path], defaults: Optional[dict] = None) -> 'ExperimentConfig':
        return cls.from_dict(read_json(path), defaults)


@dataclass
class ChannelInput:
    """Starting values and qualities of one fused channel across the inner nodes."""

    name: str
    x: np.ndarray
    s: np.ndarray
    valid: np.ndarray
    variance_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None


def estimates_frame(
        estimates: Sequence[LocalEstimate],
        sigma2: float,
        l: float,
        printed: bool = False,
) -> pd.DataFrame:
    """Per-node table of global estimates and presumed variances, in inner-node order."""
    rows = []
    for est in estimates:
        row = {
            'node': est.node,
            'valid': est.valid,
            'failure_reason': est.failure_reason.value if est.failure_reason else '',
            'mu1': est.quad.mu[0] if est.quad is not None else math.nan,
            'c1': math.nan, 'c2': math.nan, 'm1': math.nan, 'm2': math.nan,
            'var_c1': math.inf, 'var_c2': math.inf, 'var_center': math.inf,
            'sigma2': sigma2,
        }
        if est.valid:
            g = est.params_global
            quality = presumed_variances(est.params_local, l, sigma2, printed)
            row.update({'c1': g.c1, 'c2': g.c2, 'm1': g.m1, 'm2': g.m2,
                        'var_c1': quality['c1'], 'var_c2': quality['c2'], 'var_center': quality['center']})
        rows.append(row)
    return pd.DataFrame(rows, columns=[
        'node', 'valid', 'failure_reason', 'mu1', 'c1', 'c2', 'm1', 'm2',
        'var_c1', 'var_c2', 'var_center', 'sigma2',
    ])


def _local_params(row, frame: LocalFrame) -> GaussianParams:
    center = frame.to_local(np.array([row.m1, row.m2]))
    return GaussianParams(float(row.c1), float(row.c2), float(center[0]), float(center[1]))


def _quality_fn(channel: str, table: pd.DataFrame, frames: Mapping[int, LocalFrame], l: float,
                sigma2: float, printed: bool) -> Callable[[np.ndarray], np.ndarray]:
    """Presumed variance of every node evaluated at a candidate state x(t)."""
    rows = list(table.itertuples(index=False))
    bases = [_local_params(row, frames[int(row.node)]) if row.valid else None for row in rows]

    def fn(x: np.ndarray) -> np.ndarray:
        out = np.full(len(rows), math.inf)
        for i, (row, base) in enumerate(zip(rows, bases)):
            if base is None:
                continue
            try:
                if channel == 'c1':
                    out[i] = variance_c1(l, base.with_amplitude(float(x[i])), sigma2, printed)
                elif channel == 'c2':
                    params = GaussianParams(base.c1, float(x[i]), base.m1, base.m2)
                    out[i] = variance_c2(l, params, sigma2, printed)
                else:
                    params = base.with_center(frames[int(row.node)].to_local(np.asarray(x[i], dtype=float)))
                    out[i] = presumed_variances(params, l, sigma2, printed)['center']
            except InvalidParameters:
                out[i] = math.inf
        return out

    return fn


def channel_inputs(
        table: pd.DataFrame,
        net: HexNetwork,
        frames: Optional[Mapping[int, LocalFrame]] = None,
        printed: bool = False,
) -> Dict[str, ChannelInput]:
    """Fusion inputs per channel; invalid nodes get placeholder values and infinite variance.

    Placeholders: the node's own reading mu1 for C1, l^2 for C2 and the node
    position for the center.
    """
    frames = frames or inner_frames(net)
    valid = table['valid'].to_numpy(dtype=bool)
    nodes = table['node'].to_numpy(dtype=int)
    sigma2 = float(table['sigma2'].iloc[0]) if len(table) else 0.0
    l = net.l
    c1 = np.where(valid, table['c1'].to_numpy(dtype=float), table['mu1'].to_numpy(dtype=float))
    c2 = np.where(valid, table['c2'].to_numpy(dtype=float), l * l)
    center = np.where(valid[:, None], table[['m1', 'm2']].to_numpy(dtype=float), net.nodes[nodes])
    inputs = {}
    for name, x, column in (('c1', c1, 'var_c1'), ('c2', c2, 'var_c2'), ('center', center, 'var_center')):
        s = np.where(valid, table[column].to_numpy(dtype=float), math.inf)
        inputs[name] = ChannelInput(name, x, s, valid, _quality_fn(name, table, frames, l, sigma2, printed))
    return inputs


@dataclass
class MethodOutcome:
    method: str
    values: Dict[str, Union[float, np.ndarray]]
    reports: Dict[str, FusionReport] = field(default_factory=dict)
    errors: Dict[str, float] = field(default_factory=dict)


def fuse_channel(
        method: str,
        graph: FusionGraph,
        channel: ChannelInput,
        tol: float = 1e-9,
        s_rtol: float = 1e-6,
        max_iter: int = 10_000,
        record_trace: bool = False,
) -> FusionReport:
    """Run one distributed fusion method on one channel."""
    kind, k_bar = parse_method(method)
    if kind == 'average':
        indicator = np.where(channel.valid, 1.0, math.inf)
        return two_channel_fusion(graph, channel.x, indicator, tol, max_iter, record_trace)
    if kind == 'two-channel':
        return two_channel_fusion(graph, channel.x, clamp_qualities(channel.s), tol, max_iter, record_trace)
    if kind == 'wise':
        return run_wise(graph, channel.x, channel.s, tol, s_rtol, max_iter, record_trace)
    if kind == 'recompute':
        return variant_recompute(graph, channel.x, channel.variance_fn, tol, max_iter, record_trace)
    if kind == 'hybrid':
        return variant_hybrid(graph, channel.x, channel.s, k_bar, tol, s_rtol, max_iter, record_trace)
    raise InvalidParameters(f"Method '{method}' is not a distributed fusion method")


def _raw_outcome(method: str, inputs: Mapping[str, ChannelInput], truth: GaussianParams) -> MethodOutcome:
    """Median node estimate per channel and median per-node absolute error over valid nodes."""
    outcome = MethodOutcome(method, {'c1': math.nan, 'c2': math.nan, 'center': np.full(2, math.nan)})
    for name in ('c1', 'c2'):
        channel = inputs[name]
        target = truth.c1 if name == 'c1' else truth.c2
        if channel.valid.any():
            x = channel.x[channel.valid]
            outcome.values[name] = float(np.median(x))
            outcome.errors[name] = float(np.median(np.abs(x - target)))
        else:
            outcome.errors[name] = math.nan
    center = inputs['center']
    if center.valid.any():
        x = center.x[center.valid]
        offsets = x - truth.center[None, :]
        outcome.values['center'] = np.median(x, axis=0)
        outcome.errors['m1'] = float(np.median(np.abs(offsets[:, 0])))
        outcome.errors['m2'] = float(np.median(np.abs(offsets[:, 1])))
        outcome.errors['center'] = float(np.median(np.linalg.norm(offsets, axis=1)))
    else:
        outcome.errors.update({'m1': math.nan, 'm2': math.nan, 'center': math.nan})
    return outcome


def _init_method_summary_entry(label: str) -> Dict[str, object]:
    return {
        'label': label,
        'trials': 0,
        'fused': 0,
        'failed': 0,
        'not_converged': 0,
        'warnings': [],
    }


def _print_method_summary(summary: Dict[str, Dict[str, object]], title: str, discards: Mapping) -> None:
    if not summary:
        LOGGER.info("%s finished with no work to report.", title)
        return
    print(f"\n{title}")
    print(
        f"  node estimates={discards.get('node_estimates', 0)}, invalid={discards.get('invalid', 0)} "
        f"({100 * discards.get('invalid_rate', 0.0):.1f}%)"
    )
    for data in summary.values():
        print(
            f"- {data['label']}: trials={data['trials']}, fused={data['fused']}, "
            f"failed={data['failed']}, not_converged={data['not_converged']}"
        )
        warnings = data.get('warnings', [])
        for warn in warnings[:5]:
            print(f"    ! {warn}")
        if len(warnings) > 5:
            print(f"    ! ... and {len(warnings) - 5} more")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: pd.DataFrame
    node_estimates: pd.DataFrame
    discards: Dict[str, object]
    summary: Dict[str, Dict[str, object]] = field(default_factory=dict)

    @property
    def aggregates(self) -> pd.DataFrame:
        return aggregate(self.records)

    @property
    def methods(self) -> List[str]:
        return list(self.config.methods)

    def to_dict(self) -> dict:
        return {
            'config': self.config.to_dict(),
            'records': self.records.to_dict(orient='records'),
            'node_estimates': self.node_estimates.to_dict(orient='records'),
            'aggregates': self.aggregates.to_dict(orient='records'),
            'discards': self.discards,
        }

    def save(self, path: Union[str, Path]) -> Path:
        return write_json(path, self.to_dict())

    def print_summary(self, title: str = 'Experiment summary') -> None:
        _print_method_summary(self.summary, title, self.discards)


def records_from_json(data: Mapping) -> pd.DataFrame:
    """Per-trial records of a saved result, with missing errors restored as NaN."""
    frame = pd.DataFrame(list(data.get('records', [])), columns=RECORD_COLUMNS)
    for column in ('estimate', 'error'):
        frame[column] = pd.to_numeric(frame[column], errors='coerce').astype(float)
    return frame


def aggregate(records: pd.DataFrame) -> pd.DataFrame:
    """Median and mean absolute error per (method, channel); `count` ignores failed fusions."""
    if records.empty:
        return pd.DataFrame(columns=AGGREGATE_COLUMNS)
    grouped = records.groupby(['method', 'channel'], sort=True)['error']
    table = grouped.agg(median_error='median', mean_error='mean', count='count', trials='size').reset_index()
    return table[AGGREGATE_COLUMNS]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Noise, local inversion, every configured fusion method and error bookkeeping, trial by trial."""
    net = config.network()
    frames = inner_frames(net)
    graph = FusionGraph.from_network(net)
    truth = config.truth
    clean = np.asarray(evaluate(truth, net.nodes), dtype=float)
    sigma = config.noise_sigma
    sigma2 = sigma * sigma
    LOGGER.info(
        "Running %d trials on '%s' (%d inner nodes), sigma=%.4g, methods=%s.",
        config.trials, net.name, graph.n, sigma, ', '.join(config.methods),
    )

    records: List[dict] = []
    node_rows: List[pd.DataFrame] = []
    reason_counts: Dict[str, int] = {}
    invalid_total = 0
    summary = {m: _init_method_summary_entry(m) for m in config.methods}

    for trial in range(config.trials):
        stream = NoiseStream(sigma, trial_seed(config.seed, trial))
        values = perturb_values(clean, stream)
        estimates = estimate_network(net, values, frames)
        table = estimates_frame(estimates, sigma2, net.l, config.printed)
        invalid = table.loc[~table['valid'], 'failure_reason']
        invalid_total += len(invalid)
        for reason in invalid:
            reason_counts[reason] = reason_counts.get(reason, 0) + 1
        nodes = table[['node', 'valid', 'failure_reason', 'c1', 'c2', 'm1', 'm2']].copy()
        nodes.insert(0, 'trial', trial)
        node_rows.append(nodes)
        inputs = channel_inputs(table, net, frames, config.printed)

        for method in config.methods:
            entry = summary[method]
            entry['trials'] += 1
            try:
                outcome = _run_method(method, graph, inputs, truth, config)
            except HexFieldError as exc:
                entry['failed'] += 1
                entry['warnings'].append(f"trial {trial}: {exc.code}: {exc}")
                outcome = MethodOutcome(method, {'c1': math.nan, 'c2': math.nan,
                                                 'center': np.full(2, math.nan)})
            if any(not r.converged for r in outcome.reports.values()):
                entry['not_converged'] += 1
                entry['warnings'].append(f"trial {trial}: fusion hit max_iter={config.max_iter}")
            if not _is_nan_outcome(outcome):
                entry['fused'] += 1
            records.extend(_outcome_records(trial, outcome, truth))
        LOGGER.debug("Trial %d done: %d/%d valid local estimates.", trial, int(table['valid'].sum()), len(table))

    node_estimates = pd.concat(node_rows, ignore_index=True) if node_rows else pd.DataFrame(columns=NODE_COLUMNS)
    total = config.trials * graph.n
    discards = {
        'node_estimates': total,
        'invalid': invalid_total,
        'invalid_rate': invalid_total / total if total else 0.0,
        'by_reason': dict(sorted(reason_counts.items())),
    }
    if invalid_total:
        LOGGER.warning("%d of %d local estimates were invalid.", invalid_total, total)
    frame = pd.DataFrame(records, columns=RECORD_COLUMNS)
    frame['estimate'] = frame['estimate'].astype(float)
    frame['error'] = frame['error'].astype(float)
    return ExperimentResult(config, frame, node_estimates[NODE_COLUMNS], discards, summary)


def _run_method(method: str, graph: FusionGraph, inputs: Mapping[str, ChannelInput],
                truth: GaussianParams, config: ExperimentConfig) -> MethodOutcome:
    kind, _ = parse_method(method)
    if kind == 'raw':
        return _raw_outcome(method, inputs, truth)
    outcome = MethodOutcome(method, {})
    for name in FUSION_CHANNELS:
        channel = inputs[name]
        if kind == 'optimal':
            outcome.values[name] = optimal_fusion(channel.x, clamp_qualities(channel.s))
        else:
            report = fuse_channel(method, graph, channel, config.tol, config.s_rtol, config.max_iter)
            outcome.reports[name] = report
            outcome.values[name] = report.x_star
    return outcome


def _is_nan_outcome(outcome: MethodOutcome) -> bool:
    return all(np.all(np.isnan(np.asarray(v, dtype=float))) for v in outcome.values.values())


def _outcome_records(trial: int, outcome: MethodOutcome, truth: GaussianParams) -> List[dict]:
    center = np.asarray(outcome.values.get('center', np.full(2, math.nan)), dtype=float)
    c1 = float(outcome.values.get('c1', math.nan))
    c2 = float(outcome.values.get('c2', math.nan))

    def report_info(name: str) -> Tuple[Optional[bool], int]:
        report = outcome.reports.get(name)
        return (report.converged, report.iterations) if report is not None else (None, 0)

    rows = []
    entries = (
        ('c1', c1, abs(c1 - truth.c1), 'c1'),
        ('c2', c2, abs(c2 - truth.c2), 'c2'),
        ('m1', float(center[0]), abs(float(center[0]) - truth.m1), 'center'),
        ('m2', float(center[1]), abs(float(center[1]) - truth.m2), 'center'),
        ('center', math.nan, float(np.linalg.norm(center - truth.center)), 'center'),
    )
    for channel, estimate, error, source in entries:
        error = outcome.errors.get(channel, error)
        converged, iterations = report_info(source)
        rows.append({
            'trial': trial,
            'method': outcome.method,
            'channel': channel,
            'estimate': estimate,
            'error': error,
            'converged': converged,
            'iterations': iterations,
        })
    return rows
