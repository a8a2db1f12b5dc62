import math

import numpy as np
import pytest

from leognss.constellation import WalkerConfig, build_walker
from leognss.topology import (
    GraphSnapshot,
    TopologyError,
    active_snapshot,
    check_mixing,
    graph_sequence,
    knn_graph,
    local_metropolis_row,
    metropolis,
    period_length,
    second_singular_value,
    write_edges_csv,
)


def test_collinear_k1_is_a_path():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert knn_graph(P, 1).edges == ((0, 1), (1, 2), (2, 3))


def test_ring_k2():
    a = np.linspace(0, 2 * math.pi, 8, endpoint=False)
    P = np.c_[np.cos(a), np.sin(a), np.zeros(8)] * 7e6
    g = knn_graph(P, 2)
    assert set(g.edges) == {(i, i + 1) for i in range(7)} | {(0, 7)}
    assert np.all(g.degrees == 2)


def test_disconnected_knn_rejected():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [100, 0, 0], [101, 0, 0]])
    with pytest.raises(TopologyError, match="disconnected"):
        knn_graph(P, 1)


def test_metropolis_two_nodes_and_path():
    assert np.allclose(metropolis(GraphSnapshot(0, 2, ((0, 1),))), 0.5)
    W = metropolis(GraphSnapshot(0, 3, ((0, 1), (1, 2))))
    expected = np.array([[2 / 3, 1 / 3, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 2 / 3]])
    assert np.allclose(W, expected, atol=1e-15)


def test_metropolis_properties_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        P = rng.normal(size=(15, 3))
        g = knn_graph(P, 3)
        W = metropolis(g)
        check_mixing(W, g)
        assert second_singular_value(W) < 1.0 - 1e-9


def test_check_mixing_rejects_bad_matrices():
    g = GraphSnapshot(0, 3, ((0, 1), (1, 2)))
    W = metropolis(g)
    bad = W.copy()
    bad[0, 2] = bad[2, 0] = 0.1
    bad[0, 0] -= 0.1
    bad[2, 2] -= 0.1
    with pytest.raises(TopologyError, match="non-edge"):
        check_mixing(bad, g)
    with pytest.raises(TopologyError, match="stochastic"):
        check_mixing(W * 1.01, g)
    asym = W.copy()
    asym[0, 1] += 0.01
    with pytest.raises(TopologyError, match="symmetric"):
        check_mixing(asym, g)


def test_local_rows_match_global_matrix():
    g = knn_graph(np.random.default_rng(1).normal(size=(12, 3)), 2)
    W = metropolis(g)
    deg = {q: int(d) for q, d in enumerate(g.degrees)}
    for l, nb in enumerate(g.neighbors):
        row = local_metropolis_row(l, nb, {q: deg[q] for q in nb}, g.L)
        assert np.array_equal(row, W[l])


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(10, 3))
    perm = rng.permutation(10)
    W = metropolis(knn_graph(P, 3))
    Wp = metropolis(knn_graph(P[perm], 3))
    assert np.allclose(Wp, W[np.ix_(perm, perm)])


def test_snapshot_schedule():
    assert period_length(12_000, 3) == 4000
    assert [active_snapshot(k, 4000, 3) for k in (0, 3999, 4000, 8000, 11_999)] == [0, 0, 1, 2, 2]
    assert period_length(10, 3) == 4
    assert active_snapshot(11, 4, 3) == 2
    assert all(active_snapshot(k, period_length(50, 1), 1) == 0 for k in range(50))


def test_sequence_edges_change_over_an_orbit():
    els = build_walker(WalkerConfig(20, 4, 5, 550e3, 53.0))
    seq = graph_sequence(els, 5700.0, 3, 4)
    assert [g.index for g in seq] == [0, 1, 2]
    assert all(g.is_connected() for g in seq)
    assert len({g.edges for g in seq}) > 1


def test_edges_csv(tmp_path):
    g = GraphSnapshot(0, 3, ((0, 1), (1, 2)))
    write_edges_csv([g], [metropolis(g)], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,l,q,weight"
    assert len(lines) == 3
    assert float(lines[1].split(",")[3]) == pytest.approx(1 / 3)


def test_malformed_snapshot_rejected():
    with pytest.raises(TopologyError):
        GraphSnapshot(0, 3, ((1, 1),))
    with pytest.raises(TopologyError):
        GraphSnapshot(0, 3, ((2, 1),))
