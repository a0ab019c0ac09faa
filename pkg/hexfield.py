from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from analysis.sensitivity import (
    closed_form_discrepancies,
    closed_form_variances,
    monte_carlo_variances,
    numeric_oracle_variances,
)
from analysis.spacing import (
    SpacingChannel,
    canonical_root,
    minimize_spacing,
    prop2_bounds,
    refined_lower_bound,
    sweep_lopt_map,
)
from config import CLOSED_FORM_VARIANTS, NOISE_READINGS, load_config
from errors import HexFieldError, InvalidParameters
from experiments.ranking import compare_methods
from experiments.records import (
    load_network,
    read_estimates_csv,
    save_network,
    to_jsonable,
    write_csv,
    write_json,
)
from experiments.runner import (
    ExperimentConfig,
    channel_inputs,
    estimates_frame,
    fuse_channel,
    parse_method,
    run_experiment,
)
from fusion.consensus import FusionGraph, clamp_qualities, optimal_fusion, trace_frame
from sensing.estimator import estimate_network, inner_frames
from sensing.field import GaussianParams, NoiseStream, evaluate, perturb_values
from sensing.lattice import build_network

logger = logging.getLogger(__name__)

EXIT_ERROR = 2
SIGNED_VALUE_OPTIONS = ('--sweep', '--params', '--truth')


def _print_json(data) -> None:
    print(json.dumps(to_jsonable(data), indent=2, sort_keys=True))


def _parse_axis(text: str) -> np.ndarray:
    """'lo:hi:n' -> n evenly spaced values."""
    parts = text.split(':')
    if len(parts) != 3:
        raise InvalidParameters(f"Sweep axis must look like lo:hi:n, got '{text}'")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise InvalidParameters(f"Could not parse sweep axis '{text}': {exc}") from exc
    if n < 1:
        raise InvalidParameters(f"Sweep axis needs at least one point, got {n}")
    return np.linspace(lo, hi, n)


def parse_sweep(text: str):
    axes = text.split(',')
    if len(axes) != 2:
        raise InvalidParameters(f"Sweep must look like m1lo:m1hi:n,m2lo:m2hi:n, got '{text}'")
    return _parse_axis(axes[0]), _parse_axis(axes[1])


def cmd_tessellate(args, config) -> None:
    net = build_network(args.preset, args.rings, args.edge)
    save_network(net, args.out)
    logger.info("Wrote network '%s' to %s", net.name, args.out)
    print(
        f"{net.name}: nodes={net.size}, edges={len(net.edges)}, inner={len(net.inner)}, "
        f"interior={len(net.interior)}"
    )


def cmd_estimate(args, config) -> None:
    net = load_network(args.net)
    truth = GaussianParams.parse(args.truth)
    seed = config['experiment']['seed'] if args.seed is None else args.seed
    stream = NoiseStream(args.sigma, seed)
    values = perturb_values(np.asarray(evaluate(truth, net.nodes), dtype=float), stream)
    estimates = estimate_network(net, values)
    table = estimates_frame(estimates, args.sigma ** 2, net.l, args.closed_form == 'printed')
    write_csv(table, args.out)
    valid = int(table['valid'].sum())
    logger.info("Wrote %d local estimates to %s", len(table), args.out)
    print(f"inner nodes={len(table)}, valid={valid}, invalid={len(table) - valid}")


def cmd_sensitivity(args, config) -> None:
    params = GaussianParams.parse(args.params)
    printed = args.closed_form_variant == 'printed'
    if args.report:
        frame = closed_form_discrepancies(args.edge, params, args.sigma2)
        print(frame.to_string(index=False))
        return
    if args.oracle:
        result = numeric_oracle_variances(args.edge, params, args.sigma2)
    elif args.monte_carlo:
        seed = config['experiment']['seed'] if args.seed is None else args.seed
        result = monte_carlo_variances(args.edge, params, math.sqrt(args.sigma2), args.monte_carlo, seed)
    else:
        result = closed_form_variances(args.edge, params, args.sigma2, printed)
    _print_json(result.to_dict())


def cmd_optimize_spacing(args, config) -> None:
    params = GaussianParams.parse(args.params)
    channel = SpacingChannel(args.channel)
    grid_points = args.grid_points or config['spacing']['grid_points']
    printed = args.closed_form_variant == 'printed'
    if args.sweep:
        m1_values, m2_values = parse_sweep(args.sweep)
        frame = sweep_lopt_map(channel, m1_values, m2_values, params.c2, args.sigma2, params.c1, grid_points, printed)
        if args.out:
            write_csv(frame, args.out)
            logger.info("Wrote %d sweep points to %s", len(frame), args.out)
        else:
            print(frame.to_csv(index=False), end='')
        return
    result = minimize_spacing(channel, params, args.sigma2, grid_points, printed)
    payload = {
        'channel': channel.value,
        'l_opt': result.l_opt,
        's_at_opt': result.s_at_opt,
        'bracket': list(result.bracket),
        'local_minima': [list(m) for m in result.local_minima],
    }
    if channel is SpacingChannel.C2:
        lower, upper = prop2_bounds(params.c2, params.mod_m)
        payload['prop2_bounds'] = [lower, upper]
        payload['refined_lower_bound'] = refined_lower_bound(params.c2, params.m1, params.m2)
        if params.mod_m == 0:
            payload['canonical_root'] = canonical_root(params.c2)
    if args.out:
        write_csv(pd.DataFrame([{'m1': params.m1, 'm2': params.m2, 'channel': channel.value,
                                 'l_opt': result.l_opt, 's_at_opt': result.s_at_opt}]), args.out)
    _print_json(payload)


def _aligned_estimates(table: pd.DataFrame, inner: Sequence[int]) -> pd.DataFrame:
    missing = sorted(set(inner) - set(table['node']))
    if missing:
        raise InvalidParameters(f"Estimates file has no rows for inner nodes {missing}")
    return table.set_index('node').loc[list(inner)].reset_index()


def cmd_fuse(args, config) -> None:
    net = load_network(args.net)
    table = _aligned_estimates(read_estimates_csv(args.estimates), net.inner)
    kind, _ = parse_method(args.method)
    if kind == 'raw':
        raise InvalidParameters("'raw' is not a fusion method; see the estimates file instead")
    frames = inner_frames(net)
    graph = FusionGraph.from_network(net)
    inputs = channel_inputs(table, net, frames, args.closed_form == 'printed')
    tol = args.tol if args.tol is not None else config['consensus']['tol']
    max_iter = args.max_iter if args.max_iter is not None else config['consensus']['max_iter']
    s_rtol = config['consensus']['s_rtol']
    record = bool(args.trace) or config['consensus']['record_trace']

    fused, iterations, converged, traces = {}, {}, {}, []
    for name, channel in inputs.items():
        if kind == 'optimal':
            fused[name] = optimal_fusion(channel.x, clamp_qualities(channel.s))
            continue
        report = fuse_channel(args.method, graph, channel, tol, s_rtol, max_iter, record)
        fused[name] = report.x_star
        iterations[name] = report.iterations
        converged[name] = report.converged
        if record:
            names = ['m1', 'm2'] if name == 'center' else [name]
            traces.append(trace_frame(report, names, graph.labels))
    center = np.asarray(fused['center'], dtype=float)
    payload = {
        'method': args.method,
        'c1': fused['c1'],
        'c2': fused['c2'],
        'm1': float(center[0]),
        'm2': float(center[1]),
        'iterations': iterations,
        'converged': converged,
    }
    if args.trace and traces:
        write_csv(pd.concat(traces, ignore_index=True), args.trace)
        logger.info("Wrote fusion trace to %s", args.trace)
    if args.out:
        write_json(args.out, payload)
    _print_json(payload)


def cmd_experiment(args, config) -> None:
    exp = ExperimentConfig.load(args.config, config)
    overrides = {}
    if args.trials is not None:
        overrides['trials'] = args.trials
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.noise_variance_frac is not None or args.noise_reading is not None:
        overrides['noise'] = {
            'variance_frac': exp.variance_frac if args.noise_variance_frac is None else args.noise_variance_frac,
            'reading': args.noise_reading or exp.noise_reading,
        }
    if overrides:
        data = exp.to_dict()
        data.update(overrides)
        exp = ExperimentConfig.from_dict(data, config)
    result = run_experiment(exp)
    result.print_summary()
    print(result.aggregates.to_string(index=False))
    if args.rank and len(exp.methods) > 1:
        ranking = compare_methods(result, config['ranking']['resamples'], config['ranking']['confidence'], exp.seed)
        print(ranking.to_string(index=False))
    if args.out:
        result.save(args.out)
        logger.info("Wrote experiment result to %s", args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Honeycomb sensor-network estimation of a Gaussian field')
    parser.add_argument('--verbose', action='store_true', help='Enable debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('tessellate', help='Generate a honeycomb network and write it as JSON')
    p.add_argument('--rings', type=int, default=1)
    p.add_argument('--edge', type=float, default=1.0, help='Edge length l')
    p.add_argument('--preset', choices=['paper12'], help='Use the 12-node preset instead of rings')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_tessellate)

    p = sub.add_parser('estimate', help='Sample noisy readings and invert them at every inner node')
    p.add_argument('--net', required=True)
    p.add_argument('--truth', required=True, help='C1,C2,m1,m2')
    p.add_argument('--sigma', type=float, default=0.0, help='Noise standard deviation')
    p.add_argument('--seed', type=int)
    p.add_argument('--closed-form', choices=CLOSED_FORM_VARIANTS, default='corrected')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_estimate)

    p = sub.add_parser('sensitivity', help='Error variances of the local inversion')
    p.add_argument('--params', required=True, help='C1,C2,m1,m2')
    p.add_argument('--edge', type=float, required=True)
    p.add_argument('--sigma2', type=float, required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument('--oracle', action='store_true', help='Numeric (DPhi)^-1 oracle')
    mode.add_argument('--closed-form', action='store_true', help='Closed-form formulas (default)')
    mode.add_argument('--monte-carlo', type=int, metavar='N', help='Monte Carlo with N trials')
    mode.add_argument('--report', action='store_true', help='Closed-form versus oracle discrepancy table')
    p.add_argument('--variant', dest='closed_form_variant', choices=CLOSED_FORM_VARIANTS)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_sensitivity)

    p = sub.add_parser('optimize-spacing', help='Edge length minimising an error variance')
    p.add_argument('--channel', choices=[c.value for c in SpacingChannel], required=True)
    p.add_argument('--params', required=True, help='C1,C2,m1,m2')
    p.add_argument('--sigma2', type=float, default=1.0)
    p.add_argument('--sweep', help='m1lo:m1hi:n,m2lo:m2hi:n')
    p.add_argument('--grid-points', type=int)
    p.add_argument('--variant', dest='closed_form_variant', choices=CLOSED_FORM_VARIANTS)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_optimize_spacing)

    p = sub.add_parser('fuse', help='Fuse per-node estimates over the inner-node graph')
    p.add_argument('--method', required=True, help='average, two-channel, wise, recompute, hybrid:K or optimal')
    p.add_argument('--estimates', required=True)
    p.add_argument('--net', required=True)
    p.add_argument('--tol', type=float)
    p.add_argument('--max-iter', type=int)
    p.add_argument('--closed-form', choices=CLOSED_FORM_VARIANTS, default='corrected')
    p.add_argument('--trace')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser('experiment', help='Run a seeded multi-trial experiment from a JSON config')
    p.add_argument('--config', required=True)
    p.add_argument('--out')
    p.add_argument('--trials', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--noise-variance-frac', type=float, help='Noise variance as a fraction of the peak value')
    p.add_argument('--noise-reading', choices=NOISE_READINGS)
    p.add_argument('--rank', action='store_true', help='Print the bootstrap ranking of methods')
    p.set_defaults(handler=cmd_experiment)
    return parser


def _attach_option_values(argv: List[str]) -> List[str]:
    """Join `--sweep -1:1:5,...` into `--sweep=-1:1:5,...` so argparse keeps a leading minus as a value."""
    joined: List[str] = []
    tokens = iter(argv)
    for token in tokens:
        if token in SIGNED_VALUE_OPTIONS:
            value = next(tokens, None)
            joined.append(token if value is None else f"{token}={value}")
        else:
            joined.append(token)
    return joined


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_attach_option_values(sys.argv[1:] if argv is None else list(argv)))
    config = load_config()
    level = logging.DEBUG if args.verbose else getattr(logging, config['logging']['level'], logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s',
    )
    if getattr(args, 'closed_form_variant', 'unset') is None:
        args.closed_form_variant = config['sensitivity']['closed_form']
    try:
        args.handler(args, config)
    except HexFieldError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(exc.machine_line(), file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
