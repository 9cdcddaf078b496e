import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odlab.core import (
    GlobalDistribution,
    ModelError,
    Network,
    Node,
    Section,
    TimeGrid,
    build_incidence,
    load_counts,
    load_network,
    load_od_sequence,
    normalize_counts,
    production_attraction,
    save_counts,
    save_network,
    save_od_sequence,
    to_distribution,
)

from conftest import complete_network, make_network


def test_incidence_two_nodes():
    N = build_incidence(make_network([(0, 1)]))
    np.testing.assert_array_equal(N, [[-1.0], [1.0]])


def test_incidence_isolated_node():
    N = build_incidence(make_network([(0, 1)], n_nodes=3))
    assert not N[2].any()


def test_incidence_triangle_brute_force():
    net = complete_network(3)
    N = build_incidence(net)
    assert N.shape == (3, 6)
    np.testing.assert_array_equal(N.sum(axis=0), 0)
    for sec in net.sections:
        for node in range(3):
            expected = 1 if node == sec.to_node else -1 if node == sec.from_node else 0
            assert N[node, sec.id] == expected
    assert np.all((N == 1).sum(axis=0) == 1) and np.all((N == -1).sum(axis=0) == 1)


@pytest.mark.parametrize(
    "edges, msg",
    [([(0, 0)], "self loop"), ([(0, 1), (0, 1)], "duplicate"), ([(0, 5)], "unknown node")],
)
def test_network_rejects_invalid(edges, msg):
    nodes = (Node(0, 0, 0), Node(1, 1, 0))
    secs = tuple(Section(k, a, b, 1.0, 1.0, 1.0) for k, (a, b) in enumerate(edges))
    with pytest.raises(ModelError, match=msg):
        Network(nodes, secs)


def test_network_rejects_nonpositive_attributes():
    with pytest.raises(ModelError):
        Network((Node(0, 0, 0), Node(1, 1, 0)), (Section(0, 0, 1, 0.0, 1.0, 1.0),))


def test_timegrid():
    g = TimeGrid(12, 72, 4)
    assert g.k == 6
    with pytest.raises(ModelError):
        TimeGrid(5, 72, 4)


def test_normalize_counts_examples():
    np.testing.assert_allclose(normalize_counts([[2, 2], [4, 8]]), [[0.125, 0.125], [0.25, 0.5]])
    E = np.zeros((3, 4))
    E[1, 2] = 7.0
    assert normalize_counts(E)[1, 2] == 1.0
    np.testing.assert_allclose(normalize_counts(np.full((3, 4), 5.0)), 1 / 12)
    with pytest.raises(ModelError, match="empty observation"):
        normalize_counts(np.zeros((2, 2)))


def test_production_attraction_examples():
    p, a = production_attraction(np.array([[[0, 3], [2, 0]]]))
    np.testing.assert_array_equal(p, [3, 2])
    np.testing.assert_array_equal(a, [2, 3])
    p, a = production_attraction(np.zeros((2, 3, 3)))
    assert not p.any() and not a.any()
    seq = np.zeros((2, 2, 2))
    seq[0] = [[0, 1], [4, 0]]
    p, a = production_attraction(seq)
    np.testing.assert_array_equal(p[2:], 0)
    np.testing.assert_array_equal(a[2:], 0)


def test_to_distribution_examples():
    d = to_distribution([3, 2, 5, 0], "production")
    np.testing.assert_allclose(d.values, [0.3, 0.2, 0.5, 0.0])
    np.testing.assert_array_equal(to_distribution([0, 0, 4.0], "attraction").values, [0, 0, 1])
    with pytest.raises(ModelError, match="degenerate flows"):
        to_distribution([0.0, 0.0], "production")


def test_global_distribution_rejects_unnormalized():
    with pytest.raises(ModelError):
        GlobalDistribution(np.array([0.5, 0.6]), "production")


flows = arrays(np.float64, st.integers(2, 20), elements=st.floats(0, 1e6)).filter(lambda a: a.sum() > 1e-3)


@given(flows, st.floats(1e-3, 1e3))
def test_to_distribution_scale_invariant(f, c):
    d1 = to_distribution(f, "production").values
    d2 = to_distribution(c * f, "production").values
    np.testing.assert_allclose(d1, d2, rtol=1e-12, atol=1e-15)
    assert abs(d1.sum() - 1) < 1e-9
    assert np.argmax(d1) == np.argmax(f)


@given(arrays(np.float64, (3, 4), elements=st.floats(0, 1e5)).filter(lambda a: a.sum() > 1e-3),
       st.floats(1e-3, 1e3))
def test_normalize_counts_scale_invariant(E, c):
    D = normalize_counts(E)
    assert abs(D.sum() - 1) < 1e-12 and np.all(D >= 0)
    np.testing.assert_allclose(normalize_counts(c * E), D, rtol=1e-12, atol=1e-15)


seqs = arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1e4)).map(
    lambda a: a * (1 - np.eye(4))[None]
)


@settings(max_examples=50)
@given(seqs, st.floats(1e-2, 1e2))
def test_flow_totals_and_round_trip(seq, c):
    p, a = production_attraction(seq)
    assert np.isclose(p.sum(), seq.sum()) and np.isclose(a.sum(), seq.sum())
    if seq.sum() > 1e-6:
        d1 = to_distribution(production_attraction(seq)[0], "production").values
        d2 = to_distribution(production_attraction(c * seq)[0], "production").values
        np.testing.assert_allclose(d1, d2, rtol=1e-10, atol=1e-14)


def test_serialization_round_trip(tmp_path, rng):
    net = complete_network(3)
    save_network(net, tmp_path / "net.json")
    assert load_network(tmp_path / "net.json") == net
    seq = rng.uniform(0, 5, size=(2, 3, 3)) * (1 - np.eye(3))
    save_od_sequence(seq, tmp_path / "seq.csv")
    np.testing.assert_array_equal(load_od_sequence(tmp_path / "seq.csv"), seq)
    E = rng.uniform(0, 5, size=(4, 6))
    save_counts(E, tmp_path / "E.csv")
    np.testing.assert_array_equal(load_counts(tmp_path / "E.csv"), E)
    header = (tmp_path / "seq.csv").read_text().splitlines()[0]
    assert header.startswith("interval,0-0,0-1")


def test_od_sequence_rejects_diagonal(tmp_path):
    seq = np.ones((1, 2, 2))
    with pytest.raises(ModelError):
        save_od_sequence(seq, tmp_path / "x.csv")


def test_distribution_round_trip(tmp_path):
    from odlab.core import GlobalDistribution, load_distribution, save_distribution

    d = GlobalDistribution(np.array([0.1, 0.2, 0.7]), "attraction", "inferred")
    save_distribution(d, tmp_path / "d.json")
    back = load_distribution(tmp_path / "d.json")
    np.testing.assert_array_equal(back.values, d.values)
    assert (back.kind, back.provenance) == ("attraction", "inferred")
