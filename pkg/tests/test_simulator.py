import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odlab.core import Network, Node, Section, TimeGrid
from odlab.simulator import (
    RoutingError,
    TripLog,
    back_calculate,
    bpr_time,
    reconstruct_counts,
    shortest_tree,
    simulate,
)

from conftest import complete_network, make_network, random_sequence


def _line(lengths, speed=10.0, capacity=100.0):
    n = len(lengths) + 1
    nodes = tuple(Node(i, float(i), 0.0) for i in range(n))
    secs = tuple(Section(k, k, k + 1, float(L), speed, capacity) for k, L in enumerate(lengths))
    return Network(nodes, secs)


def test_single_packet_free_flow():
    net = make_network([(0, 1)])  # 100 m at 10 m/s: 10 s
    grid = TimeGrid(I=2, o=2, delta=0, interval_seconds=60.0)
    seq = np.zeros((2, 2, 2))
    seq[0, 0, 1] = 1.0
    E, log = simulate(net, seq, grid)
    assert E.sum() == 1.0 and E[0, 0] == 1.0
    P = back_calculate(seq, log)
    assert np.count_nonzero(P) == 1 and P[0, 0, 0, 1] == 1.0


def test_zero_sequence():
    net = complete_network(3)
    E, log = simulate(net, np.zeros((2, 3, 3)), TimeGrid(2, 4, 1))
    assert not E.any() and len(log) == 0


def test_lag_two_sections():
    # section 0 takes 90 s = 1.5 intervals; the packet leaves at 30 s and enters section 1 at 120 s
    net = _line([900.0, 100.0])
    grid = TimeGrid(I=4, o=4, delta=0, interval_seconds=60.0)
    seq = np.zeros((4, 3, 3))
    seq[0, 0, 2] = 1.0
    E, log = simulate(net, seq, grid)
    expected = np.zeros((4, 2))
    expected[0, 0] = 1.0
    expected[2, 1] = 1.0
    np.testing.assert_array_equal(E, expected)
    assert log.packets[0].entries == ((0, 0), (1, 2))


def test_whole_demand_on_short_path():
    net = _line([50.0, 50.0])
    grid = TimeGrid(I=1, o=1, delta=0, interval_seconds=60.0)
    seq = np.zeros((1, 3, 3))
    seq[0, 0, 2] = 4.0
    E, log = simulate(net, seq, grid)
    P = back_calculate(seq, log)
    assert P[0, 0, 0, 2] == 1.0 and P[0, 0, 1, 2] == 1.0
    np.testing.assert_array_equal(E, [[4.0, 4.0]])


def test_truncation_keeps_log():
    net = _line([2000.0, 100.0])
    grid = TimeGrid(I=1, o=1, delta=0, interval_seconds=60.0)
    seq = np.zeros((1, 3, 3))
    seq[0, 0, 2] = 1.0
    E, log = simulate(net, seq, grid)
    assert E[0, 1] == 0.0
    assert log.packets[0].entries[-1][1] > 0


def test_unreachable_pair_named():
    net = make_network([(0, 1)], n_nodes=3)
    seq = np.zeros((1, 3, 3))
    seq[0, 2, 0] = 1.0
    with pytest.raises(RoutingError, match="node 2 to node 0"):
        simulate(net, seq, TimeGrid(1, 2, 0))


def test_tie_break_smallest_section():
    net = make_network([(0, 1), (1, 3), (0, 2), (2, 3)])
    _, pred = shortest_tree(net, np.ones(4), 0)
    assert pred[3] == 1
    net = make_network([(0, 2), (2, 3), (0, 1), (1, 3)])
    _, pred = shortest_tree(net, np.ones(4), 0)
    assert pred[3] == 1


def _reaggregate(log: TripLog) -> np.ndarray:
    E = np.zeros((log.grid.o, log.n_sec))
    for p in log.packets:
        for sec, tau in p.entries:
            if tau < log.grid.o:
                E[tau, sec] += p.flow
    return E


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_identity_random(seed):
    rng = np.random.default_rng(seed)
    net = complete_network(3, length=400.0, capacity=20.0)
    grid = TimeGrid(I=3, o=9, delta=1, interval_seconds=30.0)
    seq = random_sequence(rng, 3, 3, 0, 50, zero_frac=0.3)
    E, log = simulate(net, seq, grid)
    np.testing.assert_allclose(_reaggregate(log), E, rtol=1e-12, atol=1e-12)
    P = back_calculate(seq, log)
    np.testing.assert_allclose(reconstruct_counts(P, seq), E, rtol=1e-12, atol=1e-12)
    assert np.all((P >= 0) & (P <= 1 + 1e-12))
    assert np.all(P.sum(axis=0) <= 1 + 1e-12)
    for t in range(grid.I):
        assert not P[: t * grid.k, t].any()


def test_entries_non_decreasing_and_deterministic(rng):
    net = complete_network(4, length=600.0, capacity=10.0)
    grid = TimeGrid(I=2, o=8, delta=1, interval_seconds=30.0)
    seq = random_sequence(rng, 2, 4, 0, 40)
    E1, log1 = simulate(net, seq, grid)
    E2, log2 = simulate(net, seq, grid)
    assert log1 == log2 and np.array_equal(E1, E2)
    for p in log1.packets:
        taus = [tau for _, tau in p.entries]
        assert taus == sorted(taus)


def test_back_calculate_rejects_mismatch(rng):
    net = complete_network(3)
    grid = TimeGrid(I=1, o=2, delta=0)
    seq = random_sequence(rng, 1, 3, 1, 5)
    _, log = simulate(net, seq, grid)
    other = seq.copy()
    other[0, 0, 1] = 0.0
    with pytest.raises(Exception, match="zero-demand"):
        back_calculate(other, log)


def test_triplog_round_trip(tmp_path, rng):
    net = complete_network(3)
    grid = TimeGrid(I=2, o=4, delta=1)
    _, log = simulate(net, random_sequence(rng, 2, 3, 0, 9), grid)
    log.save(tmp_path / "log.jsonl")
    assert TripLog.load(tmp_path / "log.jsonl") == log


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 500), st.floats(0, 500))
def test_monotone_congestion(d1, extra):
    # a single section: every entry happens at departure, so load and delay rise with demand
    net = make_network([(0, 1)], length=500.0, capacity=30.0)
    grid = TimeGrid(I=2, o=6, delta=0, interval_seconds=30.0)
    seq = np.zeros((2, 2, 2))
    seq[:, 0, 1] = d1
    E1, _ = simulate(net, seq, grid)
    seq[0, 0, 1] += extra
    E2, _ = simulate(net, seq, grid)
    ff = np.array([50.0])
    cap = np.array([30.0])
    for tau in range(1, grid.o):
        assert bpr_time(ff, E2[tau - 1], cap)[0] >= bpr_time(ff, E1[tau - 1], cap)[0]


def test_congestion_produces_lag():
    net = _line([300.0, 300.0], capacity=5.0)
    grid = TimeGrid(I=2, o=4, delta=0, interval_seconds=60.0)
    light = np.zeros((2, 3, 3))
    light[:, 0, 2] = 1.0
    _, log_light = simulate(net, light, grid)
    _, log_heavy = simulate(net, 40.0 * light, grid)
    # the packet leaving in interval 1 meets the load of interval 0 and reaches section 1 later
    late = lambda log: [p for p in log.packets if p.interval == 1][0].entries[1][1]
    assert late(log_heavy) > late(log_light)
