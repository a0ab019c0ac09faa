import logging
import math

import networkx as nx
import numpy as np
import pytest

from errors import AllWeightsZero, DisconnectedGraph, InvalidParameters, NotStochastic, SparsityViolation
from fusion.consensus import (
    TRACE_COLUMNS,
    ConsensusState,
    FusionGraph,
    average_consensus,
    check_stochastic,
    clamp_qualities,
    metropolis_weights,
    optimal_fusion,
    run_wise,
    spread,
    trace_frame,
    two_channel_fusion,
    uniform_weights,
    variant_hybrid,
    variant_recompute,
    wise_matrices,
    wise_qualities,
    wise_step,
)
from sensing.lattice import preset_twelve_node_network


def _random_connected_graph(rng, n):
    while True:
        graph = nx.gnp_random_graph(n, 0.4, seed=int(rng.integers(0, 2 ** 31)))
        if nx.is_connected(graph):
            return graph


def test_graph_validation():
    with pytest.raises(InvalidParameters):
        FusionGraph(2, (frozenset({1}), frozenset({0, 1})))
    with pytest.raises(InvalidParameters):
        FusionGraph(2, (frozenset({0, 1}), frozenset({1})))
    with pytest.raises(InvalidParameters):
        FusionGraph(0, ())
    split = nx.Graph([(0, 1), (2, 3)])
    with pytest.raises(DisconnectedGraph):
        FusionGraph.from_networkx(split)


def test_graph_from_network_uses_inner_nodes():
    net = preset_twelve_node_network(1.0)
    graph = FusionGraph.from_network(net)
    assert graph.n == 6
    assert graph.labels == net.inner
    assert all(len(hood) == 3 for hood in graph.closed_neighborhoods)


def test_weight_matrices_are_stochastic():
    graph = FusionGraph.from_networkx(nx.path_graph(5))
    for P in (uniform_weights(graph), metropolis_weights(graph)):
        check_stochastic(P, graph)
    P = metropolis_weights(graph)
    np.testing.assert_allclose(P, P.T)
    np.testing.assert_allclose(P.sum(axis=0), 1.0)
    assert P[0, 1] == pytest.approx(1.0 / 3.0)


def test_check_stochastic_errors():
    graph = FusionGraph.from_networkx(nx.path_graph(3))
    with pytest.raises(NotStochastic):
        check_stochastic(np.full((3, 3), 0.5), graph)
    with pytest.raises(SparsityViolation):
        check_stochastic(np.full((3, 3), 1.0 / 3.0), graph)


def test_average_consensus_reaches_mean():
    report = average_consensus(FusionGraph.cycle(6), [1, 2, 3, 4, 5, 6])
    assert report.converged
    assert report.x_star == pytest.approx(3.5, abs=1e-9)
    assert math.isnan(report.s_star)


def test_average_consensus_on_agreeing_state_stops_immediately():
    report = average_consensus(FusionGraph.cycle(4), [2.0] * 4)
    assert report.iterations == 0
    assert report.converged


def test_single_node_graph():
    graph = FusionGraph(1, (frozenset({0}),))
    report = run_wise(graph, [4.2], [0.3])
    assert report.iterations == 0
    assert report.x_star == 4.2
    assert report.s_star == 0.3


def test_optimal_fusion_examples():
    assert optimal_fusion([0.0, 1.0], [1.0, 3.0]) == pytest.approx(0.25)
    assert optimal_fusion([0.0, 5.0], [2.0, math.inf]) == 0.0
    np.testing.assert_allclose(optimal_fusion([[0.0, 2.0], [1.0, 4.0]], [1.0, 1.0]), [0.5, 3.0])
    with pytest.raises(AllWeightsZero):
        optimal_fusion([1.0, 2.0], [math.inf, math.inf])
    with pytest.raises(InvalidParameters):
        optimal_fusion([1.0, 2.0], [0.0, 1.0])


def test_two_channel_fusion_matches_optimal():
    rng = np.random.default_rng(8)
    graph = FusionGraph.cycle(6)
    x0 = rng.normal(size=6)
    variances = rng.uniform(0.1, 10.0, size=6)
    report = two_channel_fusion(graph, x0, variances, tol=1e-12)
    assert report.converged
    assert report.x_star == pytest.approx(optimal_fusion(x0, variances), abs=1e-8)
    assert report.s_star == pytest.approx(1.0 / np.sum(1.0 / variances))


def test_two_channel_fusion_ignores_infinite_variance():
    graph = FusionGraph.cycle(5)
    report = two_channel_fusion(graph, [1.0, 1.0, 1.0, 1.0, 100.0], [1, 1, 1, 1, math.inf], tol=1e-12)
    assert report.x_star == pytest.approx(1.0, abs=1e-9)


def test_two_node_wise_step():
    graph = FusionGraph.complete(2)
    state = wise_step(ConsensusState(np.array([0.0, 1.0]), np.array([1.0, 3.0])), graph)
    np.testing.assert_allclose(state.x, [0.25, 0.25])
    np.testing.assert_allclose(state.s, [1.2, 1.2])
    report = run_wise(graph, [0.0, 1.0], [1.0, 3.0])
    assert report.iterations == 1
    assert report.x_star == pytest.approx(0.25)
    assert report.s_star == pytest.approx(1.2)


def test_equal_qualities_reduce_to_average_consensus():
    graph = FusionGraph.from_networkx(nx.path_graph(6))
    x0 = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0]
    wise = run_wise(graph, x0, [1.0] * 6, record_trace=True)
    plain = average_consensus(graph, x0, record_trace=True)
    assert len(wise.trace) == len(plain.trace)
    for a, b in zip(wise.trace, plain.trace):
        np.testing.assert_allclose(a.x, b.x, atol=1e-12)


def test_wise_weight_concentrates_on_best_node():
    x0 = np.arange(6, dtype=float)
    s0 = [1.0] + [1e4] * 5
    report = run_wise(FusionGraph.cycle(6), x0, s0)
    assert report.converged
    assert abs(report.x_star - x0[0]) <= 0.01 * spread(x0)


def test_wise_invariants_on_random_graphs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        graph = FusionGraph.from_networkx(_random_connected_graph(rng, n))
        x0 = rng.uniform(-10.0, 10.0, size=n)
        s0 = rng.uniform(0.1, 10.0, size=n)
        report = run_wise(graph, x0, s0, record_trace=True)
        assert report.converged
        assert spread(report.x) <= 1e-9
        assert spread(report.s) <= 1e-6 * report.s.max()
        slack = 1e-12 * s0.max()
        previous = report.trace[0]
        for state in report.trace:
            P, M = wise_matrices(graph, state.s)
            assert np.abs(P.sum(axis=1) - 1.0).max() <= 1e-12
            assert np.abs(M.sum(axis=1) - 1.0).max() <= 1e-12
            assert state.s.min() >= s0.min() - slack
            assert state.s.max() <= s0.max() + slack
            assert state.x.max() <= previous.x.max() + 1e-12
            assert state.x.min() >= previous.x.min() - 1e-12
            assert state.s.max() <= previous.s.max() + slack
            assert state.s.min() >= previous.s.min() - slack
            previous = state


def test_wise_supports_multichannel_states():
    graph = FusionGraph.cycle(4)
    x0 = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])
    report = run_wise(graph, x0, [1.0, 2.0, 3.0, 4.0])
    assert report.x_star.shape == (2,)
    assert report.x_star[1] == pytest.approx(1.0)


def test_non_convergence_is_reported():
    report = run_wise(FusionGraph.cycle(8), np.arange(8.0), np.ones(8), max_iter=2)
    assert not report.converged
    assert report.iterations == 2
    assert 'max_iter=2' in report.diagnostic


def test_clamp_qualities():
    clamped = clamp_qualities([0.0, 2.0, math.inf])
    assert clamped[0] == 1e-12
    assert clamped[1] == 2.0
    assert clamped[2] == 2e6
    with pytest.raises(AllWeightsZero):
        clamp_qualities([math.inf, math.inf])
    with pytest.raises(InvalidParameters):
        clamp_qualities([-1.0, 1.0])


def test_recompute_with_constant_variance_tracks_average_consensus():
    graph = FusionGraph.cycle(5)
    x0 = [5.0, 1.0, -2.0, 0.5, 3.0]
    recompute = variant_recompute(graph, x0, lambda x: np.ones(5), record_trace=True)
    plain = average_consensus(graph, x0, record_trace=True)
    assert recompute.converged
    assert recompute.iterations == plain.iterations
    np.testing.assert_allclose(recompute.x, plain.x, atol=1e-12)


def test_recompute_uses_current_estimates():
    graph = FusionGraph.complete(3)
    report = variant_recompute(graph, [0.0, 1.0, 10.0], lambda x: 1.0 + np.abs(x))
    assert report.converged
    assert report.x_star < np.mean([0.0, 1.0, 10.0])


def test_recompute_without_finite_quality_fails_softly():
    report = variant_recompute(FusionGraph.cycle(3), [1.0, 2.0, 3.0], lambda x: np.full(3, math.inf))
    assert not report.converged
    assert report.diagnostic


def test_hybrid_without_inner_steps_is_wise():
    graph = FusionGraph.cycle(6)
    x0 = np.linspace(-1, 1, 6)
    s0 = np.linspace(0.5, 3.0, 6)
    hybrid = variant_hybrid(graph, x0, s0, k_bar=0, record_trace=True)
    wise = run_wise(graph, x0, s0, record_trace=True)
    assert hybrid.iterations == wise.iterations
    for a, b in zip(hybrid.trace, wise.trace):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.s, b.s)


def test_hybrid_with_inner_steps_converges_inside_hull():
    x0 = np.linspace(-1, 1, 6)
    report = variant_hybrid(FusionGraph.cycle(6), x0, np.linspace(0.5, 3.0, 6), k_bar=20)
    assert report.converged
    assert x0.min() <= report.x_star <= x0.max()
    with pytest.raises(InvalidParameters):
        variant_hybrid(FusionGraph.cycle(3), [0, 1, 2], [1, 1, 1], k_bar=-1)


def test_trace_frame_layout():
    report = run_wise(FusionGraph.cycle(3), [0.0, 1.0, 2.0], [1.0, 1.0, 2.0], record_trace=True)
    frame = trace_frame(report, node_labels=[10, 11, 12])
    assert list(frame.columns) == TRACE_COLUMNS
    assert len(frame) == 3 * len(report.trace)
    assert set(frame['node']) == {10, 11, 12}
    assert trace_frame(run_wise(FusionGraph.cycle(3), [0, 1, 2], [1, 1, 1])).empty


def test_infinite_qualities_lend_no_weight():
    graph = FusionGraph.from_networkx(nx.path_graph(3))
    P, M = wise_matrices(graph, np.array([math.inf, math.inf, 2.0]))
    np.testing.assert_array_equal(P, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(M, P)
    state = wise_step(ConsensusState(np.array([7.0, 8.0, 3.0]), np.array([math.inf, math.inf, 2.0])), graph)
    np.testing.assert_array_equal(state.x, [7.0, 3.0, 3.0])
    assert math.isinf(state.s[0])
    assert list(state.s[1:]) == [2.0, 2.0]


def test_wise_qualities_keep_infinity_and_raise_small_values():
    s = wise_qualities([0.0, math.nan, math.inf, 3.0], 4)
    assert s[0] == 1e-12
    assert math.isinf(s[1]) and math.isinf(s[2])
    assert s[3] == 3.0
    with pytest.raises(AllWeightsZero):
        run_wise(FusionGraph.cycle(3), [1.0, 2.0, 3.0], [math.inf] * 3)
    with pytest.raises(InvalidParameters):
        wise_qualities([1.0, 2.0], 3)


@pytest.mark.parametrize('method', ['wise', 'hybrid', 'recompute'])
def test_starting_values_of_unweighted_nodes_never_reach_the_result(method):
    graph = FusionGraph.cycle(6)
    s0 = np.array([1.0, math.inf, math.inf, 2.0, math.inf, math.inf])

    def fuse(placeholder):
        x0 = np.where(np.isfinite(s0), [0.0, 0.0, 0.0, 3.0, 0.0, 0.0], placeholder)
        if method == 'wise':
            return run_wise(graph, x0, s0)
        if method == 'hybrid':
            return variant_hybrid(graph, x0, s0, k_bar=5)
        return variant_recompute(graph, x0, lambda x: s0)

    high, low = fuse(100.0), fuse(-100.0)
    assert high.converged and low.converged
    assert high.x_star == low.x_star
    assert -1e-12 <= high.x_star <= 3.0 + 1e-12


def test_recompute_carries_quality_into_nodes_without_one():
    graph = FusionGraph.from_networkx(nx.path_graph(3))
    report = variant_recompute(graph, [0.0, 100.0, 3.0], lambda x: np.array([1.0, math.inf, 2.0]))
    assert report.converged
    assert np.all(np.isfinite(report.s))
    assert -1e-12 <= report.x_star <= 3.0 + 1e-12


def test_hybrid_tracks_wise_when_most_nodes_lack_quality():
    graph = FusionGraph.cycle(6)
    x0 = np.array([0.2, 50.0, 50.0, 0.4, 50.0, 50.0])
    s0 = np.array([1.0, math.inf, math.inf, 1.0, math.inf, math.inf])
    wise = run_wise(graph, x0, s0)
    hybrid = variant_hybrid(graph, x0, s0, k_bar=5)
    assert hybrid.x_star == pytest.approx(wise.x_star, abs=0.2)
    assert 0.2 - 1e-12 <= hybrid.x_star <= 0.4 + 1e-12


def test_capping_is_not_reported_as_a_warning(caplog):
    with caplog.at_level(logging.WARNING):
        clamp_qualities([1.0, math.inf])
        run_wise(FusionGraph.cycle(4), [0.0, 1.0, 2.0, 3.0], [1.0, math.inf, 2.0, math.inf])
    assert not caplog.records
